//! Shape-preserving grouped-convolution decoder over the token grid.
//!
//! Parameters: `dec.{k}.conv.w` `(D, D/groups, k, k)`, `dec.{k}.conv.b`,
//! `dec.{k}.ln.g`, `dec.{k}.ln.b` for each layer, then the `1x1` projection
//! `dec.proj.w` `(target, D, 1, 1)` and `dec.proj.b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// What the decoder regresses per token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Layer-averaged teacher features, width `D`.
    Features,
    /// Raw fbank patch pixels, width `patch * patch`.
    Pixels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub kernel: usize,
    pub groups: usize,
    pub target: TargetMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            kernel: 3,
            groups: 16,
            target: TargetMode::Features,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("decoder kernel must be odd, got {}", self.kernel)));
        }
        if self.groups == 0 || !channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "{channels} decoder channels not divisible into {} groups",
                self.groups
            )));
        }
        Ok(())
    }

    pub fn target_width(&self, d_model: usize, patch: usize) -> usize {
        match self.target {
            TargetMode::Features => d_model,
            TargetMode::Pixels => patch * patch,
        }
    }

    fn conv_spec(&self) -> ConvSpec {
        ConvSpec {
            stride: 1,
            padding: self.kernel / 2,
            groups: self.groups,
        }
    }

    /// Scalar parameter count for `channels` channels and a `target`-wide head.
    pub fn param_count(&self, channels: usize, target: usize) -> usize {
        let conv = (channels / self.groups) * channels * self.kernel * self.kernel + channels;
        let norm = 2 * channels;
        self.layers * (conv + norm) + target * channels + target
    }
}

pub fn init_params<R: Rng + ?Sized>(
    cfg: &DecoderConfig,
    channels: usize,
    target: usize,
    rng: &mut R,
    store: &mut ParamStore,
) -> Result<()> {
    cfg.validate(channels)?;
    let cin = channels / cfg.groups;
    let k = cfg.kernel;
    let std = 1.0 / ((cin * k * k) as f64).sqrt();
    for l in 0..cfg.layers {
        store.insert(&format!("dec.{l}.conv.w"), Tensor::randn(&[channels, cin, k, k], std, rng));
        store.insert(&format!("dec.{l}.conv.b"), Tensor::zeros(&[channels]));
        store.insert(&format!("dec.{l}.ln.g"), Tensor::full(&[channels], 1.0));
        store.insert(&format!("dec.{l}.ln.b"), Tensor::zeros(&[channels]));
    }
    store.insert(
        "dec.proj.w",
        Tensor::randn(&[target, channels, 1, 1], 1.0 / (channels as f64).sqrt(), rng),
    );
    store.insert("dec.proj.b", Tensor::zeros(&[target]));
    Ok(())
}

/// `(grid_h * grid_w, D)` time-major tokens to a `(D, grid_h, grid_w)` grid.
pub fn tokens_to_grid(tape: &mut Tape, tokens: Var, grid_h: usize, grid_w: usize) -> Result<Var> {
    let (n, d) = tape.value(tokens).dims2()?;
    if n != grid_h * grid_w {
        return Err(Error::shape(format!("{n} tokens do not fill a {grid_h}x{grid_w} grid")));
    }
    let t = tape.transpose(tokens)?;
    tape.reshape(t, &[d, grid_h, grid_w])
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens(tape: &mut Tape, grid: Var) -> Result<Var> {
    let &[c, h, w] = tape.shape(grid) else {
        return Err(Error::shape(format!("expected a (C, H, W) grid, got {:?}", tape.shape(grid))));
    };
    let flat = tape.reshape(grid, &[c, h * w])?;
    tape.transpose(flat)
}

/// Layer norm across channels at every spatial site of a `(C, H, W)` grid.
fn channel_norm(tape: &mut Tape, grid: Var, gain: Var, bias: Var) -> Result<Var> {
    let shape = tape.shape(grid).to_vec();
    let tokens = grid_to_tokens(tape, grid)?;
    let normed = tape.layer_norm(tokens, Some(gain), Some(bias))?;
    let t = tape.transpose(normed)?;
    tape.reshape(t, &shape)
}

/// Runs the conv stack on a `(D, H, W)` grid and returns `(H * W, target)`
/// predictions in token order.
pub fn decode(tape: &mut Tape, grid: Var, cfg: &DecoderConfig) -> Result<Var> {
    let channels = match tape.shape(grid) {
        &[c, _, _] => c,
        s => return Err(Error::shape(format!("decoder expects a (C, H, W) grid, got {s:?}"))),
    };
    cfg.validate(channels)?;
    let spec = cfg.conv_spec();
    let mut x = grid;
    for l in 0..cfg.layers {
        let w = tape.param(&format!("dec.{l}.conv.w"))?;
        let b = tape.param(&format!("dec.{l}.conv.b"))?;
        let g = tape.param(&format!("dec.{l}.ln.g"))?;
        let beta = tape.param(&format!("dec.{l}.ln.b"))?;
        x = tape.conv2d(x, w, Some(b), spec)?;
        x = channel_norm(tape, x, g, beta)?;
        x = tape.gelu(x);
    }
    let w = tape.param("dec.proj.w")?;
    let b = tape.param("dec.proj.b")?;
    let y = tape.conv2d(x, w, Some(b), ConvSpec::default())?;
    grid_to_tokens(tape, y)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn validation() {
        let cfg = DecoderConfig::default();
        assert!(cfg.validate(64).is_ok());
        assert!(cfg.validate(24).is_err());
        let even = DecoderConfig {
            kernel: 2,
            ..cfg.clone()
        };
        assert!(even.validate(64).is_err());
    }

    #[test]
    fn param_count_matches_store() {
        let cfg = DecoderConfig::default();
        let mut s = ParamStore::new();
        init_params(&cfg, 32, 20, &mut ChaCha8Rng::seed_from_u64(0), &mut s).unwrap();
        assert_eq!(s.num_scalars(), cfg.param_count(32, 20));
    }

    #[test]
    fn grid_round_trip() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![6, 2], (0..12).map(f64::from).collect()).unwrap();
        let xv = tape.constant(x.clone());
        let g = tokens_to_grid(&mut tape, xv, 2, 3).unwrap();
        assert_eq!(tape.shape(g), &[2, 2, 3]);
        // channel 1, row 1, col 0 is token 3
        assert_eq!(tape.value(g).data()[6 + 3], x.at(3, 1));
        let back = grid_to_tokens(&mut tape, g).unwrap();
        assert_eq!(tape.value(back), &x);
        assert!(tokens_to_grid(&mut tape, xv, 4, 2).is_err());
    }
}
