//! Patch extraction and embedding.
//!
//! The spectrogram is zero-padded on the time axis to a multiple of the patch
//! size, then cut into non-overlapping `patch x patch` tiles. Token order is
//! time-major: token `i * grid_w + j` is the tile covering frames
//! `[i*patch, (i+1)*patch)` and mel bins `[j*patch, (j+1)*patch)`. Inside a
//! tile, pixels are flattened row-major (frame, then mel bin).

use super::fbank::FbankSpectrogram;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw flattened patches, `(grid_h * grid_w, patch * patch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub pixels: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
}

/// Linearly projected patches, `(N, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbeddings {
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchEmbeddings {
    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Grid size for a spectrogram of `frames x mels`.
pub fn grid_dims(frames: usize, mels: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || !mels.is_multiple_of(patch) {
        return Err(Error::shape(format!(
            "mel axis of {mels} bins is not a multiple of patch size {patch}"
        )));
    }
    Ok((frames.div_ceil(patch), mels / patch))
}

/// Source pixel index (into the padded `frames x mels` image) of every patch
/// element, in token order. Padding pixels map to `None`.
pub fn patch_pixel_map(frames: usize, mels: usize, patch: usize) -> Result<Vec<Option<usize>>> {
    let (gh, gw) = grid_dims(frames, mels, patch)?;
    let mut map = Vec::with_capacity(gh * gw * patch * patch);
    for i in 0..gh {
        for j in 0..gw {
            for dt in 0..patch {
                let t = i * patch + dt;
                for dm in 0..patch {
                    let m = j * patch + dm;
                    map.push((t < frames).then_some(t * mels + m));
                }
            }
        }
    }
    Ok(map)
}

pub fn patchify(spec: &FbankSpectrogram, patch: usize) -> Result<Patches> {
    let (frames, mels) = spec.frames.dims2()?;
    let (grid_h, grid_w) = grid_dims(frames, mels, patch)?;
    let src = spec.frames.data();
    let data = patch_pixel_map(frames, mels, patch)?
        .into_iter()
        .map(|i| i.map_or(0.0, |i| src[i]))
        .collect();
    Ok(Patches {
        pixels: Tensor::new(vec![grid_h * grid_w, patch * patch], data)?,
        grid_h,
        grid_w,
        patch,
    })
}

/// Inverse of [`patchify`]: rebuilds the padded `(grid_h*patch, grid_w*patch)` image.
pub fn unpatchify(p: &Patches) -> Result<Tensor> {
    let frames = p.grid_h * p.patch;
    let mels = p.grid_w * p.patch;
    let mut out = vec![0.0; frames * mels];
    for (k, src) in patch_pixel_map(frames, mels, p.patch)?.into_iter().enumerate() {
        if let Some(i) = src {
            out[i] = p.pixels.data()[k];
        }
    }
    Tensor::new(vec![frames, mels], out)
}

/// Patchifies and right-multiplies each flattened patch by `proj` `(patch^2, D)`.
pub fn patchify_and_embed(spec: &FbankSpectrogram, proj: &Tensor, patch: usize) -> Result<PatchEmbeddings> {
    let (rows, d) = proj.dims2()?;
    if rows != patch * patch {
        return Err(Error::shape(format!(
            "projection has {rows} rows, expected {} for {patch}x{patch} patches",
            patch * patch
        )));
    }
    let p = patchify(spec, patch)?;
    let n = p.grid_h * p.grid_w;
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        let px = p.pixels.row(t);
        let o = &mut out[t * d..(t + 1) * d];
        for (k, &x) in px.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (ov, &w) in o.iter_mut().zip(proj.row(k)) {
                *ov += x * w;
            }
        }
    }
    Ok(PatchEmbeddings {
        tokens: Tensor::new(vec![n, d], out)?,
        grid_h: p.grid_h,
        grid_w: p.grid_w,
    })
}

/// Fixed 1-D sinusoidal encoding: `PE[p, 2i] = sin(p / 10000^(2i/D))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/D))`.
pub fn sinusoidal_pos_enc(n_tokens: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::invalid(format!("positional encoding width must be even, got {d}")));
    }
    if n_tokens == 0 {
        return Err(Error::invalid("positional encoding needs at least one position"));
    }
    let mut out = vec![0.0; n_tokens * d];
    for p in 0..n_tokens {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[p * d + 2 * i] = angle.sin();
            out[p * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![n_tokens, d], out)
}
