//! Log-mel filterbank features.
//!
//! Frames of 400 samples (25 ms at 16 kHz) every 160 samples (10 ms), a
//! Hamming window, 512-point zero-padded power spectrum, triangular filters
//! spaced evenly on the HTK mel scale, then `ln(max(E, floor))`.

use std::io::{Read, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::wav::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbankConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub n_fft: usize,
    pub frame_length: usize,
    pub frame_shift: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    /// Per-utterance mean/variance normalisation of the output.
    pub normalize: bool,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: 128,
            n_fft: 512,
            frame_length: 400,
            frame_shift: 160,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
            normalize: false,
        }
    }
}

impl FbankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.n_mels == 0 || self.frame_shift == 0 || self.frame_length == 0 {
            return Err(Error::Config("fbank sizes must be positive".into()));
        }
        if self.n_fft < self.frame_length {
            return Err(Error::Config("n_fft must be at least frame_length".into()));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config("need 0 <= f_min < f_max <= Nyquist".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// `floor((len - frame_length) / frame_shift) + 1`, or `None` when the clip
    /// is shorter than one frame.
    pub fn frame_count(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.frame_length).then(|| (n_samples - self.frame_length) / self.frame_shift + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `T x n_mels` log-mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct FbankSpectrogram {
    pub frames: Tensor,
}

impl FbankSpectrogram {
    pub const FRAME_SHIFT_MS: f64 = 10.0;
    pub const FRAME_LENGTH_MS: f64 = 25.0;

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_mels(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Precomputed window, filterbank and FFT plan.
pub struct FbankExtractor {
    cfg: FbankConfig,
    window: Vec<f64>,
    /// `n_mels x (n_fft/2 + 1)` filter weights.
    filters: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl FbankExtractor {
    pub fn new(cfg: FbankConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_length;
        let window = (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n as f64 - 1.0)).cos())
            .collect();
        let filters = mel_filterbank(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.cfg
    }

    /// Center frequency (Hz) of every mel filter.
    pub fn center_frequencies(&self) -> Vec<f64> {
        mel_points(&self.cfg)[1..=self.cfg.n_mels]
            .iter()
            .map(|&m| mel_to_hz(m))
            .collect()
    }

    pub fn compute(&self, w: &Waveform) -> Result<FbankSpectrogram> {
        let cfg = &self.cfg;
        if w.sample_rate != cfg.sample_rate {
            return Err(Error::invalid(format!(
                "sample rate {} Hz not supported (expected {} Hz; resample first)",
                w.sample_rate, cfg.sample_rate
            )));
        }
        let n_frames = cfg.frame_count(w.samples.len()).ok_or_else(|| {
            Error::invalid(format!(
                "clip of {} samples is shorter than one {}-sample frame",
                w.samples.len(),
                cfg.frame_length
            ))
        })?;
        let n_bins = cfg.n_fft / 2 + 1;
        let mut out = Vec::with_capacity(n_frames * cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; n_bins];
        for f in 0..n_frames {
            let start = f * cfg.frame_shift;
            let frame = &w.samples[start..start + cfg.frame_length];
            for (b, (s, win)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(s * win, 0.0);
            }
            buf[cfg.frame_length..].fill(Complex::new(0.0, 0.0));
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..cfg.n_mels {
                let weights = &self.filters[m * n_bins..(m + 1) * n_bins];
                let e: f64 = weights.iter().zip(&power).map(|(a, b)| a * b).sum();
                out.push(e.max(cfg.log_floor).ln());
            }
        }
        if cfg.normalize {
            normalize_in_place(&mut out);
        }
        Ok(FbankSpectrogram {
            frames: Tensor::new(vec![n_frames, cfg.n_mels], out)?,
        })
    }
}

fn normalize_in_place(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-8);
    v.iter_mut().for_each(|x| *x = (*x - mean) * inv);
}

fn mel_points(cfg: &FbankConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    (0..cfg.n_mels + 2).map(|i| lo + step * i as f64).collect()
}

/// Triangular filters, linear in mel between adjacent mel points.
fn mel_filterbank(cfg: &FbankConfig) -> Vec<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let pts = mel_points(cfg);
    let bin_mel: Vec<f64> = (0..n_bins)
        .map(|k| hz_to_mel(k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64))
        .collect();
    let mut w = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
        for (k, &mel) in bin_mel.iter().enumerate() {
            let up = (mel - l) / (c - l);
            let down = (r - mel) / (r - c);
            w[m * n_bins + k] = up.min(down).max(0.0);
        }
    }
    w
}

/// One-shot convenience wrapper around [`FbankExtractor`].
pub fn compute_fbank(w: &Waveform, cfg: &FbankConfig) -> Result<FbankSpectrogram> {
    FbankExtractor::new(cfg.clone())?.compute(w)
}

const FBNK_MAGIC: &[u8; 4] = b"FBNK";

/// Writes the `FBNK` dump: 16-byte little-endian header (magic, frames, mels,
/// reserved) followed by row-major `f32` values.
pub fn write_fbank<W: Write>(mut out: W, spec: &FbankSpectrogram) -> Result<()> {
    out.write_all(FBNK_MAGIC)?;
    out.write_all(&(spec.num_frames() as u32).to_le_bytes())?;
    out.write_all(&(spec.num_mels() as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    for &v in spec.frames.data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_fbank<R: Read>(mut input: R) -> Result<FbankSpectrogram> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Parse("truncated FBNK header".into()))?;
    if &header[..4] != FBNK_MAGIC {
        return Err(Error::Parse("bad FBNK magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (frames, mels) = (word(4), word(8));
    let mut body = vec![0u8; frames * mels * 4];
    input
        .read_exact(&mut body)
        .map_err(|_| Error::Parse("truncated FBNK body".into()))?;
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(FbankSpectrogram {
        frames: Tensor::new(vec![frames, mels], data)?,
    })
}
