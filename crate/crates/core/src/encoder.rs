//! Pre-norm differential transformer encoder.
//!
//! Layer `l` computes `x + MultiHeadDiff(LN(x))` followed by
//! `y + FFN(LN(y))`, with `FFN = Linear -> GeLU -> Linear`. Parameters live in
//! a [`ParamStore`] under `enc.{l}.*`; the optional final norm is `enc.norm.*`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_diff_traced, AttnVars, DiffAttnConfig, WeightVars};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsPosition {
    Head,
    Middle,
}

impl ClsPosition {
    /// Row index of the CLS token in a sequence built from `n_patches` tokens.
    pub fn index(self, n_patches: usize) -> usize {
        match self {
            ClsPosition::Head => 0,
            ClsPosition::Middle => n_patches / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub lambda: f64,
    /// FFN hidden width; `None` means `4 * d_model`.
    pub ffn_hidden: Option<usize>,
    pub cls_position: ClsPosition,
    pub final_norm: bool,
    /// Width used in the attention logit scale; `None` means the head width.
    pub scale_dim: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            lambda: 0.3,
            ffn_hidden: None,
            cls_position: ClsPosition::Head,
            final_norm: true,
            scale_dim: None,
        }
    }
}

impl EncoderConfig {
    pub fn attention(&self) -> DiffAttnConfig {
        DiffAttnConfig {
            d_model: self.d_model,
            heads: self.heads,
            lambda: self.lambda,
            scale_dim: self.scale_dim,
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.ffn_width() == 0 {
            return Err(Error::Config("ffn_hidden must be positive".into()));
        }
        self.attention().validate()
    }
}

fn layer_prefix(l: usize) -> String {
    format!("enc.{l}")
}

/// Adds freshly initialised encoder parameters to `store`.
pub fn init_params<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let hdim = cfg.ffn_width();
    let std_in = 1.0 / (d as f64).sqrt();
    // residual-branch outputs shrink with depth
    let depth = (2.0 * cfg.layers as f64).sqrt();
    for l in 0..cfg.layers {
        let p = layer_prefix(l);
        store.insert(&format!("{p}.ln1.g"), Tensor::full(&[d], 1.0));
        store.insert(&format!("{p}.ln1.b"), Tensor::zeros(&[d]));
        store.insert(&format!("{p}.attn.wq"), Tensor::randn(&[d, 2 * d], std_in, rng));
        store.insert(&format!("{p}.attn.wk"), Tensor::randn(&[d, 2 * d], std_in, rng));
        store.insert(&format!("{p}.attn.wv"), Tensor::randn(&[d, d], std_in, rng));
        store.insert(&format!("{p}.attn.wo"), Tensor::randn(&[d, d], std_in / depth, rng));
        store.insert(&format!("{p}.ln2.g"), Tensor::full(&[d], 1.0));
        store.insert(&format!("{p}.ln2.b"), Tensor::zeros(&[d]));
        store.insert(&format!("{p}.ffn.w1"), Tensor::randn(&[d, hdim], std_in, rng));
        store.insert(&format!("{p}.ffn.b1"), Tensor::zeros(&[hdim]));
        store.insert(
            &format!("{p}.ffn.w2"),
            Tensor::randn(&[hdim, d], 1.0 / (hdim as f64).sqrt() / depth, rng),
        );
        store.insert(&format!("{p}.ffn.b2"), Tensor::zeros(&[d]));
    }
    if cfg.final_norm {
        store.insert("enc.norm.g", Tensor::full(&[d], 1.0));
        store.insert("enc.norm.b", Tensor::zeros(&[d]));
    }
    Ok(())
}

/// Inserts the CLS row at its configured position. `tokens = None` is the
/// empty sequence.
pub fn prepend_cls(tape: &mut Tape, tokens: Option<Var>, cls: Var, position: ClsPosition) -> Result<Var> {
    let Some(tokens) = tokens else {
        return Ok(cls);
    };
    let (t, _) = tape.value(tokens).dims2()?;
    let at = position.index(t);
    if at == 0 {
        return tape.concat_rows(&[cls, tokens]);
    }
    let before = tape.slice_rows(tokens, 0, at)?;
    if at == t {
        return tape.concat_rows(&[before, cls]);
    }
    let after = tape.slice_rows(tokens, at, t - at)?;
    tape.concat_rows(&[before, cls, after])
}

/// One pre-norm encoder layer, reading parameters bound under `enc.{l}`.
pub fn encoder_layer(tape: &mut Tape, x: Var, layer: usize, cfg: &EncoderConfig) -> Result<Var> {
    encoder_layer_traced(tape, x, layer, cfg, None)
}

fn encoder_layer_traced(
    tape: &mut Tape,
    x: Var,
    layer: usize,
    cfg: &EncoderConfig,
    trace: Option<&mut Vec<WeightVars>>,
) -> Result<Var> {
    let p = layer_prefix(layer);
    let g1 = tape.param(&format!("{p}.ln1.g"))?;
    let b1 = tape.param(&format!("{p}.ln1.b"))?;
    let h = tape.layer_norm(x, Some(g1), Some(b1))?;
    let attn = AttnVars::from_tape(tape, &format!("{p}.attn"))?;
    let a = multi_head_diff_traced(tape, h, &attn, &cfg.attention(), trace)?;
    let x = tape.add(x, a)?;

    let g2 = tape.param(&format!("{p}.ln2.g"))?;
    let b2 = tape.param(&format!("{p}.ln2.b"))?;
    let h = tape.layer_norm(x, Some(g2), Some(b2))?;
    let w1 = tape.param(&format!("{p}.ffn.w1"))?;
    let fb1 = tape.param(&format!("{p}.ffn.b1"))?;
    let w2 = tape.param(&format!("{p}.ffn.w2"))?;
    let fb2 = tape.param(&format!("{p}.ffn.b2"))?;
    let u = tape.matmul(h, w1)?;
    let u = tape.add_row_bias(u, fb1)?;
    let u = tape.gelu(u);
    let f = tape.matmul(u, w2)?;
    let f = tape.add_row_bias(f, fb2)?;
    tape.add(x, f)
}

/// Every layer's output plus the (optionally normalised) final output.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    pub per_layer: Vec<Var>,
    pub output: Var,
}

impl EncoderOutputs {
    pub fn layer_values(&self, tape: &Tape) -> Vec<Tensor> {
        self.per_layer.iter().map(|&v| tape.value(v).clone()).collect()
    }
}

pub fn encode(tape: &mut Tape, tokens: Var, cfg: &EncoderConfig) -> Result<EncoderOutputs> {
    encode_traced(tape, tokens, cfg, None)
}

/// [`encode`] that also records every head's attention maps, layer by layer.
pub fn encode_traced(
    tape: &mut Tape,
    tokens: Var,
    cfg: &EncoderConfig,
    mut trace: Option<&mut Vec<Vec<WeightVars>>>,
) -> Result<EncoderOutputs> {
    let (_, width) = tape.value(tokens).dims2()?;
    if width != cfg.d_model {
        return Err(Error::shape(format!("encoder input width {width}, model width {}", cfg.d_model)));
    }
    let mut x = tokens;
    let mut per_layer = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut layer_trace = Vec::new();
        let want = trace.is_some();
        x = encoder_layer_traced(tape, x, l, cfg, want.then_some(&mut layer_trace))?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(layer_trace);
        }
        per_layer.push(x);
    }
    let output = if cfg.final_norm {
        let g = tape.param("enc.norm.g")?;
        let b = tape.param("enc.norm.b")?;
        tape.layer_norm(x, Some(g), Some(b))?
    } else {
        x
    };
    Ok(EncoderOutputs { per_layer, output })
}
