//! Dual-softmax differential attention.
//!
//! Each head `i` owns a `2D'`-wide column block of `W_Q` and `W_K`, split
//! into `[Q1 | Q2]` and `[K1 | K2]` halves, and a `D'`-wide block of `W_V`:
//!
//! ```text
//! W_Q columns: | h0: Q1 Q2 | h1: Q1 Q2 | ... |      (each half D' wide)
//! W_V columns: | h0: V | h1: V | ... |
//! ```
//!
//! The head computes `A = softmax(Q1 K1^T / sqrt(d)) - lambda * softmax(Q2 K2^T / sqrt(d))`
//! and returns `LayerNorm(A V)` (no affine). Heads are concatenated in index
//! order and projected by `W_O` of shape `(h*D', D)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffAttnConfig {
    pub d_model: usize,
    pub heads: usize,
    pub lambda: f64,
    /// Dimension used in the `1/sqrt(d)` logit scale; defaults to the head width.
    pub scale_dim: Option<usize>,
}

impl DiffAttnConfig {
    pub fn new(d_model: usize, heads: usize, lambda: f64) -> Self {
        Self {
            d_model,
            heads,
            lambda,
            scale_dim: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.scale_dim.unwrap_or_else(|| self.head_dim()) as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda must be in [0, 1), got {}", self.lambda)));
        }
        if self.scale_dim == Some(0) {
            return Err(Error::Config("scale_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Concrete attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffAttnParams {
    pub cfg: DiffAttnConfig,
    /// `(D, 2D)` = `(D, h * 2D')`
    pub w_q: Tensor,
    pub w_k: Tensor,
    /// `(D, D)` = `(D, h * D')`
    pub w_v: Tensor,
    /// `(h * D', D)`
    pub w_o: Tensor,
}

impl DiffAttnParams {
    pub fn new(cfg: DiffAttnConfig, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let expect = [
            ("W_Q", &w_q, [d, 2 * d]),
            ("W_K", &w_k, [d, 2 * d]),
            ("W_V", &w_v, [d, d]),
            ("W_O", &w_o, [d, d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::shape(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(Self {
            cfg,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    pub fn random<R: Rng + ?Sized>(cfg: DiffAttnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let std = 1.0 / (d as f64).sqrt();
        Self::new(
            cfg,
            Tensor::randn(&[d, 2 * d], std, rng),
            Tensor::randn(&[d, 2 * d], std, rng),
            Tensor::randn(&[d, d], std, rng),
            Tensor::randn(&[d, d], std, rng),
        )
    }

    /// Binds the four matrices on `tape` (as constants unless `track` is set).
    pub fn bind(&self, tape: &mut Tape, track: bool) -> AttnVars {
        AttnVars {
            w_q: tape.leaf(self.w_q.clone(), track),
            w_k: tape.leaf(self.w_k.clone(), track),
            w_v: tape.leaf(self.w_v.clone(), track),
            w_o: tape.leaf(self.w_o.clone(), track),
        }
    }

    pub fn into_store(self, prefix: &str, store: &mut ParamStore) {
        store.insert(&format!("{prefix}.wq"), self.w_q);
        store.insert(&format!("{prefix}.wk"), self.w_k);
        store.insert(&format!("{prefix}.wv"), self.w_v);
        store.insert(&format!("{prefix}.wo"), self.w_o);
    }

    pub fn from_store(cfg: DiffAttnConfig, prefix: &str, store: &ParamStore) -> Result<Self> {
        let get = |s: &str| store.require(&format!("{prefix}.{s}")).cloned();
        Self::new(cfg, get("wq")?, get("wk")?, get("wv")?, get("wo")?)
    }
}

/// Attention parameter handles on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl AttnVars {
    pub fn from_tape(tape: &Tape, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_q: tape.param(&format!("{prefix}.wq"))?,
            w_k: tape.param(&format!("{prefix}.wk"))?,
            w_v: tape.param(&format!("{prefix}.wv"))?,
            w_o: tape.param(&format!("{prefix}.wo"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadQkv {
    pub q1: Var,
    pub q2: Var,
    pub k1: Var,
    pub k2: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct WeightVars {
    pub a1: Var,
    pub a2: Var,
    pub a: Var,
}

/// Per-head attention maps for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub a1: Tensor,
    pub a2: Tensor,
    pub a: Tensor,
}

struct Projections {
    q: Var,
    k: Var,
    v: Var,
}

fn project_all(tape: &mut Tape, z: Var, p: &AttnVars, cfg: &DiffAttnConfig) -> Result<Projections> {
    let (_, width) = tape.value(z).dims2()?;
    if width != cfg.d_model {
        return Err(Error::shape(format!(
            "attention input width {width} does not match model width {}",
            cfg.d_model
        )));
    }
    Ok(Projections {
        q: tape.matmul(z, p.w_q)?,
        k: tape.matmul(z, p.w_k)?,
        v: tape.matmul(z, p.w_v)?,
    })
}

fn slice_head(tape: &mut Tape, pr: &Projections, cfg: &DiffAttnConfig, head: usize) -> Result<HeadQkv> {
    let dh = cfg.head_dim();
    let base = head * 2 * dh;
    Ok(HeadQkv {
        q1: tape.slice_cols(pr.q, base, dh)?,
        q2: tape.slice_cols(pr.q, base + dh, dh)?,
        k1: tape.slice_cols(pr.k, base, dh)?,
        k2: tape.slice_cols(pr.k, base + dh, dh)?,
        v: tape.slice_cols(pr.v, head * dh, dh)?,
    })
}

/// `(Q1, Q2, K1, K2, V)` for one head.
pub fn project_qkv(tape: &mut Tape, z: Var, p: &AttnVars, cfg: &DiffAttnConfig, head: usize) -> Result<HeadQkv> {
    if head >= cfg.heads {
        return Err(Error::invalid(format!("head {head} out of range for {} heads", cfg.heads)));
    }
    let pr = project_all(tape, z, p, cfg)?;
    slice_head(tape, &pr, cfg, head)
}

/// `A1 = softmax(Q1 K1^T * scale)`, `A2 = softmax(Q2 K2^T * scale)`, `A = A1 - lambda A2`.
pub fn diff_weights(tape: &mut Tape, qkv: &HeadQkv, lambda: f64, scale: f64) -> Result<WeightVars> {
    let softmax_path = |tape: &mut Tape, q: Var, k: Var| -> Result<Var> {
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, scale);
        tape.softmax_rows(logits)
    };
    let a1 = softmax_path(tape, qkv.q1, qkv.k1)?;
    let a2 = softmax_path(tape, qkv.q2, qkv.k2)?;
    let a2s = tape.scale(a2, lambda);
    let a = tape.sub(a1, a2s)?;
    Ok(WeightVars { a1, a2, a })
}

/// `LayerNorm(A V)` for one head, `(L, D')`.
pub fn diff_head(tape: &mut Tape, qkv: &HeadQkv, cfg: &DiffAttnConfig) -> Result<(Var, WeightVars)> {
    let w = diff_weights(tape, qkv, cfg.lambda, cfg.scale())?;
    let av = tape.matmul(w.a, qkv.v)?;
    Ok((tape.layer_norm(av, None, None)?, w))
}

/// `Concat(head_1, ..., head_h) W_O`, `(L, D)`.
pub fn multi_head_diff(tape: &mut Tape, z: Var, p: &AttnVars, cfg: &DiffAttnConfig) -> Result<Var> {
    multi_head_diff_traced(tape, z, p, cfg, None)
}

pub(crate) fn multi_head_diff_traced(
    tape: &mut Tape,
    z: Var,
    p: &AttnVars,
    cfg: &DiffAttnConfig,
    mut trace: Option<&mut Vec<WeightVars>>,
) -> Result<Var> {
    let pr = project_all(tape, z, p, cfg)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qkv = slice_head(tape, &pr, cfg, h)?;
        let (out, w) = diff_head(tape, &qkv, cfg)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(w);
        }
        heads.push(out);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    tape.matmul(cat, p.w_o)
}

/// Tensor-level convenience API.
impl DiffAttnParams {
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = multi_head_diff(&mut tape, zv, &vars, &self.cfg)?;
        Ok(tape.value(out).clone())
    }

    pub fn project_qkv(&self, z: &Tensor, head: usize) -> Result<[Tensor; 5]> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let q = project_qkv(&mut tape, zv, &vars, &self.cfg, head)?;
        Ok([q.q1, q.q2, q.k1, q.k2, q.v].map(|v| tape.value(v).clone()))
    }

    pub fn diff_head(&self, z: &Tensor, head: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let q = project_qkv(&mut tape, zv, &vars, &self.cfg, head)?;
        let (out, _) = diff_head(&mut tape, &q, &self.cfg)?;
        Ok(tape.value(out).clone())
    }

    /// Attention maps of every head.
    pub fn trace(&self, z: &Tensor) -> Result<Vec<AttentionTrace>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let mut ws = Vec::new();
        multi_head_diff_traced(&mut tape, zv, &vars, &self.cfg, Some(&mut ws))?;
        Ok(ws
            .into_iter()
            .map(|w| AttentionTrace {
                a1: tape.value(w.a1).clone(),
                a2: tape.value(w.a2).clone(),
                a: tape.value(w.a).clone(),
            })
            .collect())
    }
}

/// Tensor-level [`diff_weights`].
pub fn diff_weights_tensor(
    q1: &Tensor,
    k1: &Tensor,
    q2: &Tensor,
    k2: &Tensor,
    lambda: f64,
    d: usize,
) -> Result<AttentionTrace> {
    if d == 0 {
        return Err(Error::invalid("scale dimension must be positive"));
    }
    let mut tape = Tape::new();
    let qkv = HeadQkv {
        q1: tape.constant(q1.clone()),
        q2: tape.constant(q2.clone()),
        k1: tape.constant(k1.clone()),
        k2: tape.constant(k2.clone()),
        v: tape.constant(Tensor::scalar(0.0)),
    };
    let w = diff_weights(&mut tape, &qkv, lambda, 1.0 / (d as f64).sqrt())?;
    Ok(AttentionTrace {
        a1: tape.value(w.a1).clone(),
        a2: tape.value(w.a2).clone(),
        a: tape.value(w.a).clone(),
    })
}
