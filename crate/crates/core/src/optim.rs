//! Adam with decoupled weight decay, and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    /// Peak rate for fine-tuning; `None` means `peak_lr / 10`.
    pub finetune_lr: Option<f64>,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub batch_size: usize,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            peak_lr: 5e-4,
            finetune_lr: None,
            warmup_epochs: 2.5,
            total_epochs: 5.0,
            batch_size: 4,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.beta1) || !open(self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.peak_lr > 0.0) || self.finetune_lr.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("weight decay must be >= 0 and eps > 0".into()));
        }
        if !(self.total_epochs > 0.0) || !(self.warmup_epochs >= 0.0) || self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "need 0 <= warmup_epochs ({}) <= total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn finetune_peak(&self) -> f64 {
        self.finetune_lr.unwrap_or(self.peak_lr / 10.0)
    }

    /// Warmup length in steps, keeping the warmup/total epoch proportion.
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        ((total_steps as f64) * self.warmup_epochs / self.total_epochs).round() as usize
    }
}

/// Linear ramp from 0 to `peak` over `warmup` steps, then half-cosine to 0
/// at `total`.
pub fn cosine_warmup_lr(step: usize, total: usize, warmup: usize, peak: f64) -> Result<f64> {
    if warmup > total {
        return Err(Error::invalid(format!("warmup ({warmup}) exceeds total steps ({total})")));
    }
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond schedule end {total}")));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(peak);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Decay applies to matrices only: 1-D tensors (norm gains, biases) and the
/// CLS / mask embeddings are exempt.
pub fn default_decay(name: &str, t: &Tensor) -> bool {
    t.ndim() > 1 && name != "cls" && name != "mask_emb"
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step. Weight decay `p <- p - lr * wd * p` is
/// applied first to parameters selected by `decays`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimConfig,
    decays: impl Fn(&str, &Tensor) -> bool,
) -> Result<()> {
    params.check_isomorphic(grads)?;
    params.check_isomorphic(&state.m)?;
    params.check_isomorphic(&state.v)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("isomorphic");
        let wd = if decays(name, p) { cfg.weight_decay } else { 0.0 };
        let m = state.m.get_mut(name).expect("isomorphic").data_mut();
        let v = state.v.get_mut(name).expect("isomorphic").data_mut();
        for (i, (p, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *p -= lr * wd * *p;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *p -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_steps_scale_with_epochs() {
        let cfg = OptimConfig::default();
        assert_eq!(cfg.warmup_steps(100), 50);
        let paper = OptimConfig {
            total_epochs: 20.0,
            ..cfg
        };
        assert_eq!(paper.warmup_steps(1000), 125);
    }

    #[test]
    fn finetune_rate_default() {
        assert!((OptimConfig::default().finetune_peak() - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn validation() {
        assert!(OptimConfig::default().validate().is_ok());
        for bad in [
            OptimConfig {
                beta1: 1.0,
                ..Default::default()
            },
            OptimConfig {
                peak_lr: 0.0,
                ..Default::default()
            },
            OptimConfig {
                warmup_epochs: 6.0,
                ..Default::default()
            },
            OptimConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn decay_mask() {
        assert!(default_decay("enc.0.attn.wq", &Tensor::zeros(&[2, 2])));
        assert!(!default_decay("enc.0.ln1.g", &Tensor::zeros(&[2])));
        assert!(!default_decay("cls", &Tensor::zeros(&[1, 2])));
        assert!(!default_decay("mask_emb", &Tensor::zeros(&[1, 2])));
    }
}
