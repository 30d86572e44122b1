//! Full model wiring: patch embedding, CLS and positions, the encoder, the
//! masked student with its decoder, the teacher and the classification head.
//!
//! Parameter names outside the encoder and decoder: `embed.proj`
//! `(patch^2, D)`, `embed.bias`, optional `embed.conv.w` / `embed.conv.b`,
//! `cls` and `mask_emb` `(1, D)`, and `head.w` `(D, C)` / `head.b`.

use rand::Rng;

use crate::attention::AttentionTrace;
use crate::autograd::{ConvSpec, Tape, Var};
use crate::config::{FrontendConfig, RunConfig};
use crate::decoder::{self, decode, tokens_to_grid, TargetMode};
use crate::encoder::{self, encode, encode_traced, prepend_cls, EncoderConfig};
use crate::error::{Error, Result};
use crate::frontend::{compute_fbank, patch_pixel_map, patchify, sinusoidal_pos_enc, FbankSpectrogram, Patches, Waveform};
use crate::masking::{scatter_with_mask_token, MaskPlan};
use crate::objective::{frame_loss, global_average_pool, teacher_targets, total_loss, utterance_loss, LossBreakdown};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Fbank frames of one clip and their patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub spec: FbankSpectrogram,
    pub patches: Patches,
}

impl Features {
    pub fn from_spectrogram(spec: FbankSpectrogram, patch: usize) -> Result<Self> {
        let patches = patchify(&spec, patch)?;
        Ok(Self { spec, patches })
    }

    pub fn n_tokens(&self) -> usize {
        self.patches.grid_h * self.patches.grid_w
    }
}

pub fn featurize(w: &Waveform, cfg: &FrontendConfig) -> Result<Features> {
    Features::from_spectrogram(compute_fbank(w, &cfg.fbank)?, cfg.patch)
}

/// Student parameters: embedding, CLS, mask token, encoder and decoder.
pub fn init_model<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.encoder.d_model;
    let p = cfg.frontend.patch;
    let mut s = ParamStore::new();
    s.insert("embed.proj", Tensor::randn(&[p * p, d], 1.0 / p as f64, rng));
    s.insert("embed.bias", Tensor::zeros(&[d]));
    if cfg.frontend.front_conv {
        let mut k = Tensor::randn(&[1, 1, 3, 3], 0.01, rng);
        k.data_mut()[4] += 1.0;
        s.insert("embed.conv.w", k);
        s.insert("embed.conv.b", Tensor::zeros(&[1]));
    }
    s.insert("cls", Tensor::randn(&[1, d], 0.02, rng));
    s.insert("mask_emb", Tensor::randn(&[1, d], 0.02, rng));
    encoder::init_params(&cfg.encoder, rng, &mut s)?;
    let tw = cfg.decoder.target_width(d, p);
    decoder::init_params(&cfg.decoder, d, tw, rng, &mut s)?;
    Ok(s)
}

/// Adds a zero-initialised linear head, so initial logits are all zero.
pub fn init_head(store: &mut ParamStore, d_model: usize, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::invalid("a classification head needs at least two classes"));
    }
    store.insert("head.w", Tensor::zeros(&[d_model, classes]));
    store.insert("head.b", Tensor::zeros(&[classes]));
    Ok(())
}

pub fn head_classes(store: &ParamStore) -> Result<usize> {
    Ok(store.require("head.w")?.dims2()?.1)
}

fn patch_pixels(tape: &mut Tape, f: &Features, cfg: &FrontendConfig) -> Result<Var> {
    if !cfg.front_conv {
        return Ok(tape.constant(f.patches.pixels.clone()));
    }
    let (frames, mels) = f.spec.frames.dims2()?;
    let img = tape.constant(f.spec.frames.reshape(&[1, frames, mels])?);
    let w = tape.param("embed.conv.w")?;
    let b = tape.param("embed.conv.b")?;
    let spec = ConvSpec {
        stride: 1,
        padding: 1,
        groups: 1,
    };
    let y = tape.conv2d(img, w, Some(b), spec)?;
    let col = tape.reshape(y, &[frames * mels, 1])?;
    let zero = tape.constant(Tensor::zeros(&[1, 1]));
    let padded = tape.concat_rows(&[col, zero])?;
    let idx: Vec<usize> = patch_pixel_map(frames, mels, cfg.patch)?
        .into_iter()
        .map(|i| i.unwrap_or(frames * mels))
        .collect();
    let px = tape.gather_rows(padded, &idx)?;
    tape.reshape(px, &[f.n_tokens(), cfg.patch * cfg.patch])
}

/// Projected patch tokens `(N, D)`, before positions.
pub fn embed_tokens(tape: &mut Tape, f: &Features, cfg: &FrontendConfig) -> Result<Var> {
    let px = patch_pixels(tape, f, cfg)?;
    let w = tape.param("embed.proj")?;
    let b = tape.param("embed.bias")?;
    let t = tape.matmul(px, w)?;
    tape.add_row_bias(t, b)
}

/// The `(N + 1, D)` encoder input and where its CLS row sits.
pub struct Sequence {
    pub x: Var,
    pub cls_index: usize,
    pub pos: Tensor,
}

impl Sequence {
    /// Positional rows of the patch tokens, in patch order.
    pub fn patch_positions(&self) -> Result<Tensor> {
        let (n, d) = self.pos.dims2()?;
        let mut rows = Vec::with_capacity((n - 1) * d);
        for r in (0..n).filter(|&r| r != self.cls_index) {
            rows.extend_from_slice(self.pos.row(r));
        }
        Tensor::new(vec![n - 1, d], rows)
    }
}

/// Inserts the CLS row and adds sinusoidal positions by final sequence index.
pub fn build_sequence(tape: &mut Tape, tokens: Var, cfg: &EncoderConfig) -> Result<Sequence> {
    let (n, d) = tape.value(tokens).dims2()?;
    let cls = tape.param("cls")?;
    let seq = prepend_cls(tape, Some(tokens), cls, cfg.cls_position)?;
    let pos = sinusoidal_pos_enc(n + 1, d)?;
    let pv = tape.constant(pos.clone());
    let x = tape.add(seq, pv)?;
    Ok(Sequence {
        x,
        cls_index: cfg.cls_position.index(n),
        pos,
    })
}

/// Teacher-side regression targets for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    /// Layer-averaged features, `(N, D)`.
    pub targets: Tensor,
    /// Token mean of `targets`, `(1, D)`.
    pub pooled: Tensor,
}

pub fn teacher_forward(teacher: &ParamStore, f: &Features, cfg: &RunConfig) -> Result<TeacherOutput> {
    let mut tape = Tape::new();
    tape.bind_store(teacher, false);
    let tokens = embed_tokens(&mut tape, f, &cfg.frontend)?;
    let seq = build_sequence(&mut tape, tokens, &cfg.encoder)?;
    let out = encode(&mut tape, seq.x, &cfg.encoder)?;
    let targets = teacher_targets(&out.layer_values(&tape), seq.cls_index, cfg.objective.normalize_targets)?;
    let pooled = global_average_pool(&targets)?;
    Ok(TeacherOutput { targets, pooled })
}

pub struct StudentOutput {
    /// Encoded CLS row, `(1, D)`.
    pub cls: Var,
    /// Decoder predictions, `(N, target width)`.
    pub pred: Var,
}

/// Encodes the visible tokens of `plan`, refills masked slots with the mask
/// token and decodes the full grid.
pub fn student_forward(tape: &mut Tape, f: &Features, plan: &MaskPlan, cfg: &RunConfig) -> Result<StudentOutput> {
    let tokens = embed_tokens(tape, f, &cfg.frontend)?;
    let seq = build_sequence(tape, tokens, &cfg.encoder)?;
    let keep = plan.sequence_keep(seq.cls_index)?;
    let vis: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    let visible = tape.gather_rows(seq.x, &vis)?;
    let out = encode(tape, visible, &cfg.encoder)?.output;

    let cls_pos = vis.iter().position(|&i| i == seq.cls_index).expect("CLS is always kept");
    let cls = tape.slice_rows(out, cls_pos, 1)?;
    let rest: Vec<usize> = (0..vis.len()).filter(|&i| i != cls_pos).collect();
    let encoded = if rest.is_empty() { None } else { Some(tape.gather_rows(out, &rest)?) };
    let mask_emb = tape.param("mask_emb")?;
    let full = scatter_with_mask_token(tape, encoded, plan, mask_emb, Some(&seq.patch_positions()?))?;
    let grid = tokens_to_grid(tape, full, f.patches.grid_h, f.patches.grid_w)?;
    let pred = decode(tape, grid, &cfg.decoder)?;
    Ok(StudentOutput { cls, pred })
}

/// What the decoder regresses for this clip.
pub fn frame_targets<'a>(f: &'a Features, t: &'a TeacherOutput, cfg: &RunConfig) -> &'a Tensor {
    match cfg.decoder.target {
        TargetMode::Features => &t.targets,
        TargetMode::Pixels => &f.patches.pixels,
    }
}

/// Student loss for one masked view: `alpha * utterance + frame`.
pub fn pretrain_loss(
    tape: &mut Tape,
    f: &Features,
    teacher: &TeacherOutput,
    plan: &MaskPlan,
    cfg: &RunConfig,
) -> Result<(Var, LossBreakdown)> {
    let s = student_forward(tape, f, plan, cfg)?;
    let u = utterance_loss(tape, s.cls, &teacher.pooled)?;
    let fr = frame_loss(tape, s.pred, frame_targets(f, teacher, cfg), plan, cfg.objective.frame_mode)?;
    let alpha = cfg.objective.alpha;
    let total = total_loss(tape, u, fr, alpha)?;
    let parts = LossBreakdown::new(tape.value(u).item(), tape.value(fr).item(), alpha);
    Ok((total, parts))
}

/// Encoded CLS row of the clip; masked tokens in `plan` are dropped.
pub fn encode_cls(tape: &mut Tape, f: &Features, plan: Option<&MaskPlan>, cfg: &RunConfig) -> Result<Var> {
    let tokens = embed_tokens(tape, f, &cfg.frontend)?;
    let seq = build_sequence(tape, tokens, &cfg.encoder)?;
    let (x, cls_pos) = match plan {
        Some(p) => {
            let keep = p.sequence_keep(seq.cls_index)?;
            let vis: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
            let pos = vis.iter().position(|&i| i == seq.cls_index).expect("CLS is always kept");
            (tape.gather_rows(seq.x, &vis)?, pos)
        }
        None => (seq.x, seq.cls_index),
    };
    let out = encode(tape, x, &cfg.encoder)?.output;
    tape.slice_rows(out, cls_pos, 1)
}

/// Class logits `(1, C)` from the CLS row.
pub fn classify(tape: &mut Tape, f: &Features, plan: Option<&MaskPlan>, cfg: &RunConfig) -> Result<Var> {
    let cls = encode_cls(tape, f, plan, cfg)?;
    let w = tape.param("head.w")?;
    let b = tape.param("head.b")?;
    let z = tape.matmul(cls, w)?;
    tape.add_row_bias(z, b)
}

/// Inference-time CLS embedding with every token visible.
pub fn clip_embedding(store: &ParamStore, f: &Features, cfg: &RunConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    tape.bind_store(store, false);
    let v = encode_cls(&mut tape, f, None, cfg)?;
    Ok(tape.value(v).clone())
}

/// Inference-time logits with every token visible.
pub fn predict_logits(store: &ParamStore, f: &Features, cfg: &RunConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    tape.bind_store(store, false);
    let v = classify(&mut tape, f, None, cfg)?;
    Ok(tape.value(v).clone())
}

/// Attention maps of every head of every layer, with all tokens visible.
pub fn attention_maps(store: &ParamStore, f: &Features, cfg: &RunConfig) -> Result<Vec<Vec<AttentionTrace>>> {
    let mut tape = Tape::new();
    tape.bind_store(store, false);
    let tokens = embed_tokens(&mut tape, f, &cfg.frontend)?;
    let seq = build_sequence(&mut tape, tokens, &cfg.encoder)?;
    let mut raw = Vec::new();
    encode_traced(&mut tape, seq.x, &cfg.encoder, Some(&mut raw))?;
    Ok(raw
        .into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .map(|w| AttentionTrace {
                    a1: tape.value(w.a1).clone(),
                    a2: tape.value(w.a2).clone(),
                    a: tape.value(w.a).clone(),
                })
                .collect()
        })
        .collect())
}
