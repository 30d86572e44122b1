//! Pretraining over masked clones and supervised fine-tuning.
//!
//! Per-step randomness (mask plans, batch order) is derived from the run seed
//! with [`mix_seed`], so a run is reproducible from its config alone. Clone
//! gradients are computed in parallel and summed in a fixed order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::masking::{block_mask, make_clones, MaskPlan};
use crate::metrics::{accuracy, argmax_rows, mean_average_precision, MapReport};
use crate::model::{classify, head_classes, init_head, init_model, predict_logits, pretrain_loss, teacher_forward, Features, TeacherOutput};
use crate::objective::{is_teacher_param, LossBreakdown, TeacherState};
use crate::optim::{adam_step, cosine_warmup_lr, default_decay, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// SplitMix64 finaliser over the seed and a list of counters.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const STREAM_BATCH: u64 = 1;
const STREAM_PRETRAIN_MASK: u64 = 2;
const STREAM_FINETUNE_MASK: u64 = 3;

/// Example indices of batch `step`: consecutive slices of a sequence of
/// per-epoch shuffles of `0..n`.
pub fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for k in step * batch..(step + 1) * batch {
        let epoch = k / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &[STREAM_BATCH, epoch as u64])));
            cached = Some((epoch, order));
        }
        out.push(cached.as_ref().expect("filled above").1[k % n]);
    }
    out
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} became {v}")))
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_utt: f64,
    pub loss_frame: f64,
}

impl StepReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

/// One masked view of one clip.
pub struct CloneJob<'a> {
    pub features: &'a Features,
    pub teacher: &'a TeacherOutput,
    pub plan: MaskPlan,
}

/// Mean loss and mean gradient over `jobs`, each on its own tape.
pub fn clone_gradients(student: &ParamStore, jobs: &[CloneJob<'_>], cfg: &RunConfig) -> Result<(ParamStore, LossBreakdown)> {
    if jobs.is_empty() {
        return Err(Error::invalid("no clone jobs"));
    }
    let results: Vec<Result<(ParamStore, LossBreakdown)>> = jobs
        .par_iter()
        .map(|job| {
            let mut tape = Tape::new();
            tape.bind_store(student, true);
            let (loss, parts) = pretrain_loss(&mut tape, job.features, job.teacher, &job.plan, cfg)?;
            let grads = tape.backward(loss)?;
            Ok((grads.for_store(&tape, student), parts))
        })
        .collect();
    let mut sum = student.zeros_like();
    let mut parts = Vec::with_capacity(jobs.len());
    let scale = 1.0 / jobs.len() as f64;
    for r in results {
        let (g, p) = r?;
        sum.add_scaled(&g, scale)?;
        parts.push(p);
    }
    Ok((sum, LossBreakdown::mean(&parts).expect("non-empty")))
}

pub struct Pretrainer {
    pub cfg: RunConfig,
    pub student: ParamStore,
    pub teacher: TeacherState,
    pub adam: AdamState,
    /// Completed optimiser steps.
    pub step: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    teacher_forwards: usize,
}

impl Pretrainer {
    pub fn new(cfg: RunConfig, total_steps: usize) -> Result<Self> {
        let student = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        Self::from_student(cfg, student, total_steps)
    }

    pub fn from_student(cfg: RunConfig, student: ParamStore, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        if total_steps == 0 {
            return Err(Error::invalid("total steps must be positive"));
        }
        let teacher = TeacherState::from_student(&student, cfg.objective.ema_decay)?;
        Ok(Self {
            adam: AdamState::new(&student),
            warmup_steps: cfg.optim.warmup_steps(total_steps),
            cfg,
            student,
            teacher,
            step: 0,
            total_steps,
            teacher_forwards: 0,
        })
    }

    /// Teacher forward passes run so far.
    pub fn teacher_forwards(&self) -> usize {
        self.teacher_forwards
    }

    /// Rate used by the next step.
    pub fn next_lr(&self) -> Result<f64> {
        let s = (self.step + 1).min(self.total_steps);
        cosine_warmup_lr(s, self.total_steps, self.warmup_steps, self.cfg.optim.peak_lr)
    }

    /// Clone plans for clip `b` of the next step.
    pub fn clone_plans(&self, n_tokens: usize, b: usize) -> Result<Vec<MaskPlan>> {
        let m = &self.cfg.masking;
        let seed = mix_seed(self.cfg.seed, &[STREAM_PRETRAIN_MASK, self.step as u64, b as u64]);
        make_clones(n_tokens, m.ratio, m.block_size, m.clones, seed)
    }

    /// One teacher pass per clip, `clones` student passes per clip, one Adam
    /// step on the mean gradient, then one EMA update.
    pub fn train_step(&mut self, batch: &[&Features]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let teacher_outs: Vec<TeacherOutput> = batch
            .par_iter()
            .map(|f| teacher_forward(&self.teacher.params, f, &self.cfg))
            .collect::<Result<_>>()?;
        self.teacher_forwards += batch.len();

        let mut jobs = Vec::with_capacity(batch.len() * self.cfg.masking.clones);
        for (b, (f, t)) in batch.iter().zip(&teacher_outs).enumerate() {
            for plan in self.clone_plans(f.n_tokens(), b)? {
                jobs.push(CloneJob {
                    features: f,
                    teacher: t,
                    plan,
                });
            }
        }
        let (grads, loss) = clone_gradients(&self.student, &jobs, &self.cfg)?;
        check_finite(loss.total, "pretraining loss")?;

        let lr = self.next_lr()?;
        adam_step(&mut self.student, &grads, &mut self.adam, lr, &self.cfg.optim, default_decay)?;
        self.teacher.ema_update(&self.student)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            lr,
            loss_total: loss.total,
            loss_utt: loss.utterance,
            loss_frame: loss.frame,
        })
    }

    /// Runs until `total_steps`, drawing batches from `data`.
    pub fn run(&mut self, data: &[Features], mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("no training clips"));
        }
        while self.step < self.total_steps {
            let idx = batch_indices(data.len(), self.cfg.optim.batch_size, self.step, self.cfg.seed);
            let batch: Vec<&Features> = idx.iter().map(|&i| &data[i]).collect();
            let r = self.train_step(&batch)?;
            on_step(&r);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SingleLabel,
    MultiLabel,
}

/// A clip and its positive classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Features,
    pub labels: Vec<usize>,
}

pub struct Finetuner {
    pub cfg: RunConfig,
    /// Encoder-side parameters plus `head.*`.
    pub params: ParamStore,
    pub adam: AdamState,
    pub task: Task,
    pub step: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Finetuner {
    /// Keeps the encoder half of `pretrained` and adds a zero head.
    pub fn new(cfg: RunConfig, pretrained: &ParamStore, classes: usize, task: Task, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        if total_steps == 0 {
            return Err(Error::invalid("total steps must be positive"));
        }
        let mut params = pretrained.filter(is_teacher_param);
        init_head(&mut params, cfg.encoder.d_model, classes)?;
        Self::from_params(cfg, params, task, total_steps)
    }

    /// Resumes from parameters that already include a head.
    pub fn from_params(cfg: RunConfig, params: ParamStore, task: Task, total_steps: usize) -> Result<Self> {
        head_classes(&params)?;
        Ok(Self {
            adam: AdamState::new(&params),
            warmup_steps: cfg.optim.warmup_steps(total_steps),
            cfg,
            params,
            task,
            step: 0,
            total_steps,
        })
    }

    pub fn classes(&self) -> usize {
        head_classes(&self.params).expect("head present")
    }

    fn targets(&self, batch: &[&Example]) -> Result<Tensor> {
        let c = self.classes();
        let mut t = Tensor::zeros(&[batch.len(), c]);
        for (i, ex) in batch.iter().enumerate() {
            if self.task == Task::SingleLabel && ex.labels.len() != 1 {
                return Err(Error::invalid(format!("single-label example has labels {:?}", ex.labels)));
            }
            for &l in &ex.labels {
                if l >= c {
                    return Err(Error::invalid(format!("label {l} outside {c} classes")));
                }
                t.set(i, l, 1.0);
            }
        }
        Ok(t)
    }

    /// Fine-tuning masks for clip `b` of the next step.
    pub fn plan_for(&self, n_tokens: usize, b: usize) -> Result<MaskPlan> {
        let m = &self.cfg.masking;
        let seed = mix_seed(self.cfg.seed, &[STREAM_FINETUNE_MASK, self.step as u64, b as u64]);
        block_mask(n_tokens, m.finetune_ratio, m.block_size, seed)
    }

    /// Mean loss of `batch` under the given plans, with gradients.
    pub fn loss_and_grads(&self, batch: &[&Example], plans: &[MaskPlan]) -> Result<(f64, ParamStore)> {
        let targets = self.targets(batch)?;
        let mut tape = Tape::new();
        tape.bind_store(&self.params, true);
        let mut rows = Vec::with_capacity(batch.len());
        for (ex, plan) in batch.iter().zip(plans) {
            rows.push(classify(&mut tape, &ex.features, Some(plan), &self.cfg)?);
        }
        let logits = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
        let loss = match self.task {
            Task::SingleLabel => {
                let labels: Vec<usize> = batch.iter().map(|e| e.labels[0]).collect();
                tape.softmax_cross_entropy(logits, &labels)?
            }
            Task::MultiLabel => tape.sigmoid_bce(logits, &targets)?,
        };
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads.for_store(&tape, &self.params)))
    }

    pub fn next_lr(&self) -> Result<f64> {
        let s = (self.step + 1).min(self.total_steps);
        cosine_warmup_lr(s, self.total_steps, self.warmup_steps, self.cfg.optim.finetune_peak())
    }

    pub fn train_step(&mut self, batch: &[&Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let plans: Vec<MaskPlan> = batch
            .iter()
            .enumerate()
            .map(|(b, ex)| self.plan_for(ex.features.n_tokens(), b))
            .collect::<Result<_>>()?;
        let (loss, grads) = self.loss_and_grads(batch, &plans)?;
        check_finite(loss, "fine-tuning loss")?;
        let lr = self.next_lr()?;
        adam_step(&mut self.params, &grads, &mut self.adam, lr, &self.cfg.optim, default_decay)?;
        self.step += 1;
        Ok(loss)
    }

    pub fn run(&mut self, data: &[Example], mut on_step: impl FnMut(usize, f64)) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        while self.step < self.total_steps {
            let idx = batch_indices(data.len(), self.cfg.optim.batch_size, self.step, self.cfg.seed);
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            let loss = self.train_step(&batch)?;
            on_step(self.step, loss);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub examples: usize,
    pub accuracy: Option<f64>,
    pub map: Option<MapReport>,
}

/// Scores every example with all tokens visible.
pub fn evaluate(params: &ParamStore, data: &[Example], cfg: &RunConfig, task: Task) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("no evaluation examples"));
    }
    let c = head_classes(params)?;
    let logits: Vec<Tensor> = data
        .par_iter()
        .map(|ex| predict_logits(params, &ex.features, cfg))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = logits.iter().map(|l| l.data().to_vec()).collect();
    let scores = Tensor::from_rows(&rows)?;
    let mut labels = Tensor::zeros(&[data.len(), c]);
    for (i, ex) in data.iter().enumerate() {
        for &l in &ex.labels {
            if l >= c {
                return Err(Error::invalid(format!("label {l} outside {c} classes")));
            }
            labels.set(i, l, 1.0);
        }
    }
    Ok(match task {
        Task::SingleLabel => {
            let truth: Vec<usize> = data.iter().map(|e| e.labels[0]).collect();
            EvalReport {
                examples: data.len(),
                accuracy: Some(accuracy(&argmax_rows(&scores)?, &truth)?),
                map: None,
            }
        }
        Task::MultiLabel => EvalReport {
            examples: data.len(),
            accuracy: None,
            map: Some(mean_average_precision(&scores, &labels)?),
        },
    })
}
