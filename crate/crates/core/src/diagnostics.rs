//! Finite-difference checks of every differentiable building block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{multi_head_diff, AttnVars};
use crate::autograd::{grad_check_store, grad_check_with, ConvSpec, GradCheckOptions, Tape, Var};
use crate::config::RunConfig;
use crate::decoder::{self, decode};
use crate::encoder::{self, encoder_layer};
use crate::error::Result;
use crate::masking::block_mask;
use crate::model::{featurize, init_model, pretrain_loss, teacher_forward};
use crate::objective::TeacherState;
use crate::params::ParamStore;
use crate::synth::{synth_clip, SynthConfig};
use crate::tensor::Tensor;

/// Relative-error bound every check must meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_relative_error: f64,
    pub coords_checked: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Coordinates sampled per tensor; `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Tokens fed to the attention and encoder checks.
    pub tokens: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            max_coords_per_input: Some(48),
            seed: 0,
            tokens: 6,
        }
    }
}

/// `sum(w .* y)` for a fixed random `w`, so every output coordinate matters.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(y), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

fn outcome(name: &str, r: crate::autograd::GradCheckReport) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        max_relative_error: r.max_relative_error,
        coords_checked: r.coords_checked,
    }
}

fn primitive_checks(opts: &GradCheckOptions, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let g = Tensor::randn(&[4], 1.0, &mut rng);
    let img = Tensor::randn(&[4, 5, 5], 1.0, &mut rng);
    let k = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut rng);
    let mut out = Vec::new();
    out.push(outcome(
        "matmul",
        grad_check_with(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y, 1)
            },
            &[a.clone(), b],
            opts,
        )?,
    ));
    out.push(outcome(
        "softmax",
        grad_check_with(
            |t, v| {
                let y = t.softmax_rows(v[0])?;
                probe(t, y, 2)
            },
            std::slice::from_ref(&a),
            opts,
        )?,
    ));
    out.push(outcome(
        "layer_norm",
        grad_check_with(
            |t, v| {
                let y = t.layer_norm(v[0], Some(v[1]), Some(v[2]))?;
                probe(t, y, 3)
            },
            &[a.clone(), g.clone(), g],
            opts,
        )?,
    ));
    out.push(outcome(
        "gelu",
        grad_check_with(
            |t, v| {
                let y = t.gelu(v[0]);
                probe(t, y, 4)
            },
            &[a],
            opts,
        )?,
    ));
    out.push(outcome(
        "grouped_conv",
        grad_check_with(
            |t, v| {
                let spec = ConvSpec {
                    stride: 1,
                    padding: 1,
                    groups: 2,
                };
                let y = t.conv2d(v[0], v[1], None, spec)?;
                probe(t, y, 5)
            },
            &[img, k],
            opts,
        )?,
    ));
    Ok(out)
}

/// Runs the primitive, attention, encoder-layer, decoder and total-loss
/// checks on a freshly initialised model of shape `cfg`.
pub fn gradient_suite(cfg: &RunConfig, suite: &SuiteOptions) -> Result<Vec<CheckOutcome>> {
    cfg.validate()?;
    let opts = GradCheckOptions {
        step: 1e-5,
        max_coords_per_input: suite.max_coords_per_input,
        seed: suite.seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(suite.seed);
    let d = cfg.encoder.d_model;
    let mut out = primitive_checks(&opts, suite.seed)?;

    let mut enc = ParamStore::new();
    let one_layer = crate::encoder::EncoderConfig {
        layers: 1,
        ..cfg.encoder.clone()
    };
    encoder::init_params(&one_layer, &mut rng, &mut enc)?;
    let z = Tensor::randn(&[suite.tokens, d], 1.0, &mut rng);

    let attn = enc.filter(|n| n.starts_with("enc.0.attn."));
    let acfg = cfg.encoder.attention();
    out.push(outcome(
        "diff_attention_block",
        grad_check_store(
            |t, v| {
                let p = AttnVars::from_tape(t, "enc.0.attn")?;
                let y = multi_head_diff(t, v[0], &p, &acfg)?;
                probe(t, y, 6)
            },
            &attn,
            std::slice::from_ref(&z),
            &opts,
        )?,
    ));
    out.push(outcome(
        "encoder_layer",
        grad_check_store(
            |t, v| {
                let y = encoder_layer(t, v[0], 0, &one_layer)?;
                probe(t, y, 7)
            },
            &enc,
            &[z],
            &opts,
        )?,
    ));

    let mut dec = ParamStore::new();
    let tw = cfg.decoder.target_width(d, cfg.frontend.patch);
    decoder::init_params(&cfg.decoder, d, tw, &mut rng, &mut dec)?;
    let grid = Tensor::randn(&[d, 3, 4], 1.0, &mut rng);
    out.push(outcome(
        "decoder",
        grad_check_store(
            |t, v| {
                let y = decode(t, v[0], &cfg.decoder)?;
                probe(t, y, 8)
            },
            &dec,
            &[grid],
            &opts,
        )?,
    ));

    let student = init_model(cfg, &mut rng)?;
    let teacher = TeacherState::from_student(&init_model(cfg, &mut rng)?, cfg.objective.ema_decay)?;
    let clip_cfg = SynthConfig {
        clip_secs: 0.3,
        sample_rate: cfg.frontend.fbank.sample_rate,
        ..SynthConfig::default()
    };
    let clip = synth_clip(&[2], &clip_cfg, suite.seed)?;
    let f = featurize(&clip.wave, &cfg.frontend)?;
    let t_out = teacher_forward(&teacher.params, &f, cfg)?;
    let plan = block_mask(f.n_tokens(), cfg.masking.ratio, cfg.masking.block_size, suite.seed)?;
    out.push(outcome(
        "total_loss",
        grad_check_store(
            |t, _| Ok(pretrain_loss(t, &f, &t_out, &plan, cfg)?.0),
            &student,
            &[],
            &opts,
        )?,
    ));
    Ok(out)
}
