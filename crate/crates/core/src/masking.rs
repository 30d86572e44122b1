//! Block-wise random token masking and the multi-view clone scheme.
//!
//! Clone `c` of a master seed `s` draws from `ChaCha8Rng::seed_from_u64(s)`
//! with its stream set to `c`, so clone 0 coincides with [`block_mask`] and
//! every clone list is reproducible from `(s, n_clones)` alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// `true` = visible to the student.
    pub keep: Vec<bool>,
    pub target_ratio: f64,
    pub block_size: usize,
    pub clone_id: usize,
}

impl MaskPlan {
    /// A plan that keeps every token.
    pub fn all_visible(n_tokens: usize) -> Self {
        Self {
            keep: vec![true; n_tokens],
            target_ratio: 0.0,
            block_size: 1,
            clone_id: 0,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.keep.len()
    }

    pub fn n_visible(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn n_masked(&self) -> usize {
        self.n_tokens() - self.n_visible()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.n_masked() as f64 / self.n_tokens() as f64
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| !self.keep[i]).collect()
    }

    /// Keep flags for the sequence with a CLS row inserted at `cls_index`.
    /// The CLS row is always visible.
    pub fn sequence_keep(&self, cls_index: usize) -> Result<Vec<bool>> {
        if cls_index > self.keep.len() {
            return Err(Error::invalid(format!(
                "CLS index {cls_index} outside a sequence of {} tokens",
                self.keep.len()
            )));
        }
        let mut k = self.keep.clone();
        k.insert(cls_index, true);
        Ok(k)
    }
}

fn check_args(ratio: f64, block_size: usize) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    if block_size == 0 {
        return Err(Error::invalid("mask block size must be at least 1"));
    }
    Ok(())
}

fn place_blocks(n_tokens: usize, ratio: f64, block_size: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut keep = vec![true; n_tokens];
    let target = (ratio * n_tokens as f64).ceil() as usize;
    let block = block_size.min(n_tokens.max(1));
    let mut masked = 0;
    while masked < target {
        let start = rng.gen_range(0..=n_tokens - block);
        for k in &mut keep[start..start + block] {
            if *k {
                *k = false;
                masked += 1;
            }
        }
    }
    keep
}

fn plan_for(n_tokens: usize, ratio: f64, block_size: usize, seed: u64, clone_id: usize) -> MaskPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(clone_id as u64);
    MaskPlan {
        keep: place_blocks(n_tokens, ratio, block_size, &mut rng),
        target_ratio: ratio,
        block_size,
        clone_id,
    }
}

/// Masks random contiguous blocks (overlap allowed) until at least
/// `ceil(ratio * n_tokens)` tokens are hidden.
pub fn block_mask(n_tokens: usize, ratio: f64, block_size: usize, seed: u64) -> Result<MaskPlan> {
    check_args(ratio, block_size)?;
    Ok(plan_for(n_tokens, ratio, block_size, seed, 0))
}

pub fn make_clones(n_tokens: usize, ratio: f64, block_size: usize, n_clones: usize, seed: u64) -> Result<Vec<MaskPlan>> {
    check_args(ratio, block_size)?;
    if n_clones == 0 {
        return Err(Error::invalid("need at least one clone"));
    }
    Ok((0..n_clones)
        .map(|c| plan_for(n_tokens, ratio, block_size, seed, c))
        .collect())
}

fn check_rows(tape: &Tape, v: Var, rows: usize, what: &str) -> Result<usize> {
    let (r, d) = tape.value(v).dims2()?;
    if r != rows {
        return Err(Error::shape(format!("{what}: expected {rows} rows, got {r}")));
    }
    Ok(d)
}

/// Visible rows of `tokens` in their original order.
pub fn gather_visible(tape: &mut Tape, tokens: Var, plan: &MaskPlan) -> Result<Var> {
    check_rows(tape, tokens, plan.n_tokens(), "gather_visible")?;
    let idx = plan.visible_indices();
    if idx.is_empty() {
        return Err(Error::invalid("mask plan hides every token"));
    }
    tape.gather_rows(tokens, &idx)
}

/// Rebuilds the full token matrix: visible slots take the rows of
/// `encoded_visible` in order, masked slots take `mask_emb` plus that slot's
/// row of `pos_enc` when given.
pub fn scatter_with_mask_token(
    tape: &mut Tape,
    encoded_visible: Option<Var>,
    plan: &MaskPlan,
    mask_emb: Var,
    pos_enc: Option<&Tensor>,
) -> Result<Var> {
    let n_vis = plan.n_visible();
    let n_mask = plan.n_masked();
    let d = check_rows(tape, mask_emb, 1, "mask embedding")?;
    let mut parts = Vec::with_capacity(2);
    match encoded_visible {
        Some(v) => {
            let dv = check_rows(tape, v, n_vis, "scatter_with_mask_token")?;
            if dv != d {
                return Err(Error::shape(format!("visible width {dv}, mask embedding width {d}")));
            }
            parts.push(v);
        }
        None if n_vis > 0 => {
            return Err(Error::invalid("visible tokens expected but none supplied"));
        }
        None => {}
    }
    if n_mask > 0 {
        let mut filler = tape.repeat_rows(mask_emb, n_mask)?;
        if let Some(pe) = pos_enc {
            let (pn, pd) = pe.dims2()?;
            if pn != plan.n_tokens() || pd != d {
                return Err(Error::shape(format!(
                    "positional encodings {pn}x{pd}, expected {}x{d}",
                    plan.n_tokens()
                )));
            }
            let mut rows = Vec::with_capacity(n_mask * d);
            for i in plan.masked_indices() {
                rows.extend_from_slice(pe.row(i));
            }
            let pv = tape.constant(Tensor::new(vec![n_mask, d], rows)?);
            filler = tape.add(filler, pv)?;
        }
        parts.push(filler);
    }
    if parts.is_empty() {
        return Err(Error::invalid("cannot scatter an empty plan"));
    }
    let stacked = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let (mut vis, mut msk) = (0, n_vis);
    let order: Vec<usize> = plan
        .keep
        .iter()
        .map(|&k| {
            let slot = if k { &mut vis } else { &mut msk };
            *slot += 1;
            *slot - 1
        })
        .collect();
    tape.gather_rows(stacked, &order)
}
