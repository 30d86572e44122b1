//! Teacher targets, utterance/frame/total losses and the EMA teacher.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    /// Average over masked tokens only.
    MaskedOnly,
    /// Average over every token.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub ema_decay: f64,
    /// Standardise each teacher token row per layer before averaging.
    pub normalize_targets: bool,
    pub frame_mode: FrameMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            ema_decay: 0.999,
            normalize_targets: true,
            frame_mode: FrameMode::MaskedOnly,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        Ok(())
    }
}

fn standardise_row(row: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

/// Mean over layers of the per-layer outputs with the CLS row removed.
/// Each `(T + 1, D)` layer is optionally standardised row by row first.
pub fn teacher_targets(per_layer: &[Tensor], cls_index: usize, normalize: bool) -> Result<Tensor> {
    let first = per_layer
        .first()
        .ok_or_else(|| Error::invalid("teacher targets need at least one layer"))?;
    let (rows, d) = first.dims2()?;
    if cls_index >= rows || rows < 2 {
        return Err(Error::shape(format!("CLS index {cls_index} invalid for {rows} rows")));
    }
    let mut acc = vec![0.0; (rows - 1) * d];
    let mut row_buf = vec![0.0; d];
    for layer in per_layer {
        if layer.shape() != first.shape() {
            return Err(Error::shape(format!(
                "layer shapes differ: {:?} vs {:?}",
                layer.shape(),
                first.shape()
            )));
        }
        for (out_row, r) in (0..rows).filter(|&r| r != cls_index).enumerate() {
            row_buf.copy_from_slice(layer.row(r));
            if normalize {
                standardise_row(&mut row_buf);
            }
            for (a, v) in acc[out_row * d..(out_row + 1) * d].iter_mut().zip(&row_buf) {
                *a += v;
            }
        }
    }
    let l = per_layer.len() as f64;
    acc.iter_mut().for_each(|a| *a /= l);
    Tensor::new(vec![rows - 1, d], acc)
}

/// Global average pool over the token axis, `(T, D) -> (1, D)`.
pub fn global_average_pool(x: &Tensor) -> Result<Tensor> {
    let (t, d) = x.dims2()?;
    let mut out = vec![0.0; d];
    for r in 0..t {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= t as f64);
    Tensor::new(vec![1, d], out)
}

/// Squared L2 distance between the student CLS row and the pooled target.
pub fn utterance_loss(tape: &mut Tape, cls: Var, pooled_target: &Tensor) -> Result<Var> {
    tape.value(cls).check_same_shape(pooled_target, "utterance loss")?;
    let t = tape.constant(pooled_target.clone());
    let diff = tape.sub(cls, t)?;
    Ok(tape.l2_sq(diff))
}

/// Mean squared error over the rows selected by `mode`.
pub fn frame_loss(tape: &mut Tape, pred: Var, targets: &Tensor, plan: &MaskPlan, mode: FrameMode) -> Result<Var> {
    tape.value(pred).check_same_shape(targets, "frame loss")?;
    let (rows, _) = targets.dims2()?;
    if plan.n_tokens() != rows {
        return Err(Error::shape(format!("mask plan covers {} tokens, targets have {rows}", plan.n_tokens())));
    }
    let idx: Vec<usize> = match mode {
        FrameMode::All => (0..rows).collect(),
        FrameMode::MaskedOnly => plan.masked_indices(),
    };
    if idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let t = tape.constant(targets.clone());
    let (p, t) = if idx.len() == rows {
        (pred, t)
    } else {
        (tape.gather_rows(pred, &idx)?, tape.gather_rows(t, &idx)?)
    };
    let diff = tape.sub(p, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// `alpha * utterance + frame`.
pub fn total_loss(tape: &mut Tape, utterance: Var, frame: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    let u = tape.scale(utterance, alpha);
    tape.add(u, frame)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub utterance: f64,
    pub frame: f64,
    pub total: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn new(utterance: f64, frame: f64, alpha: f64) -> Self {
        Self {
            utterance,
            frame,
            total: alpha * utterance + frame,
            alpha,
        }
    }

    /// Componentwise mean; `total` is recomputed from the means.
    pub fn mean(parts: &[LossBreakdown]) -> Option<Self> {
        let first = parts.first()?;
        let n = parts.len() as f64;
        let u = parts.iter().map(|p| p.utterance).sum::<f64>() / n;
        let f = parts.iter().map(|p| p.frame).sum::<f64>() / n;
        Some(Self::new(u, f, first.alpha))
    }
}

/// Whether a parameter belongs to the encoder half mirrored by the teacher.
pub fn is_teacher_param(name: &str) -> bool {
    name == "cls" || name.starts_with("embed.") || name.starts_with("enc.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ParamStore,
    pub decay: f64,
    pub update_count: u64,
}

impl TeacherState {
    /// Copies the encoder parameters of `student`.
    pub fn from_student(student: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid(format!("EMA decay must lie in [0, 1], got {decay}")));
        }
        Ok(Self {
            params: student.filter(is_teacher_param),
            decay,
            update_count: 0,
        })
    }

    /// `p_t <- decay * p_t + (1 - decay) * p_s` for every teacher parameter.
    /// Nothing is modified when a shape or name check fails.
    pub fn ema_update(&mut self, student: &ParamStore) -> Result<()> {
        for (name, t) in self.params.iter() {
            let s = student
                .get(name)
                .ok_or_else(|| Error::shape(format!("student is missing teacher parameter `{name}`")))?;
            t.check_same_shape(s, name)?;
        }
        let tau = self.decay;
        for (name, t) in self.params.iter_mut() {
            let s = student.get(name).expect("checked above");
            for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = tau * *a + (1.0 - tau) * b;
            }
        }
        self.update_count += 1;
        Ok(())
    }
}
