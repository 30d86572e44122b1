//! Labelled synthetic audio: tones, chirps and noise textures.
//!
//! Class `k` picks a generator by `k % 6`: low tone, high tone, rising chirp,
//! falling chirp, amplitude-modulated tone, band of noise bursts. Classes
//! beyond the sixth shift the base frequency so every class stays distinct.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::Waveform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub clips: usize,
    pub clip_secs: f64,
    pub classes: usize,
    /// Standard deviation of the additive white noise.
    pub noise: f64,
    /// Mix one to three classes per clip and label all of them.
    pub multi_label: bool,
    pub sample_rate: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clips: 200,
            clip_secs: 1.0,
            classes: 4,
            noise: 0.02,
            multi_label: false,
            sample_rate: 16_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.classes < 2 || !(self.clip_secs > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config(
                "synthetic data needs clips > 0, classes >= 2 and a positive duration".into(),
            ));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise level must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelledClip {
    pub wave: Waveform,
    /// Sorted positive classes; exactly one unless multi-label.
    pub labels: Vec<usize>,
}

fn class_signal(class: usize, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let octave = (class / 6) as f64;
    let shift = 1.0 + 0.35 * octave;
    let amp = rng.gen_range(0.3..0.6);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let dur = n as f64 / sr;
    let tone = |f: f64, i: usize| (2.0 * PI * f * i as f64 / sr + phase).sin();
    match class % 6 {
        0 => {
            let f = rng.gen_range(250.0..450.0) * shift;
            (0..n).map(|i| amp * tone(f, i)).collect()
        }
        1 => {
            let f = rng.gen_range(2200.0..3200.0) * shift;
            (0..n).map(|i| amp * tone(f, i)).collect()
        }
        2 | 3 => {
            let (lo, hi) = (400.0 * shift, 3600.0 * shift.min(2.0));
            let (f0, f1) = if class % 6 == 2 { (lo, hi) } else { (hi, lo) };
            let k = (f1 - f0) / dur;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    amp * (2.0 * PI * (f0 * t + 0.5 * k * t * t) + phase).sin()
                })
                .collect()
        }
        4 => {
            let f = rng.gen_range(900.0..1300.0) * shift;
            let rate = rng.gen_range(3.0..6.0);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    amp * (0.5 + 0.5 * (2.0 * PI * rate * t).sin()) * tone(f, i)
                })
                .collect()
        }
        _ => {
            // bursts of two close partials, like a crude rattle
            let f = rng.gen_range(5000.0..6000.0) / shift;
            let period = (sr * 0.1) as usize;
            (0..n)
                .map(|i| {
                    let on = (i % period) < period / 3;
                    if on {
                        amp * 0.5 * (tone(f, i) + tone(f * 1.07, i))
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    }
}

/// One clip of the given classes, deterministic in `seed`.
pub fn synth_clip(classes: &[usize], cfg: &SynthConfig, seed: u64) -> Result<LabelledClip> {
    cfg.validate()?;
    if classes.is_empty() || classes.iter().any(|&c| c >= cfg.classes) {
        return Err(Error::invalid(format!("classes {classes:?} outside 0..{}", cfg.classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = cfg.sample_rate as f64;
    let n = (cfg.clip_secs * sr).round() as usize;
    let mut samples = vec![0.0; n];
    for &c in classes {
        for (s, v) in samples.iter_mut().zip(class_signal(c, n, sr, &mut rng)) {
            *s += v / classes.len() as f64;
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid(e.to_string()))?;
        for s in &mut samples {
            *s += normal.sample(&mut rng);
        }
    }
    let mut labels = classes.to_vec();
    labels.sort_unstable();
    labels.dedup();
    Ok(LabelledClip {
        wave: Waveform::new(samples, cfg.sample_rate)?,
        labels,
    })
}

/// A class-balanced dataset; clip `i` has class `i % classes` in
/// single-label mode.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<Vec<LabelledClip>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.clips)
        .map(|i| {
            let classes = if cfg.multi_label {
                let k = rng.gen_range(1..=3.min(cfg.classes));
                rand::seq::index::sample(&mut rng, cfg.classes, k).into_vec()
            } else {
                vec![i % cfg.classes]
            };
            synth_clip(&classes, cfg, rng.gen())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let cfg = SynthConfig {
            clips: 8,
            clip_secs: 0.1,
            ..Default::default()
        };
        let a = synth_dataset(&cfg, 3).unwrap();
        assert_eq!(a, synth_dataset(&cfg, 3).unwrap());
        let labels: Vec<usize> = a.iter().map(|c| c.labels[0]).collect();
        assert_eq!(labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(a[0].wave.samples.len(), 1600);
    }

    #[test]
    fn multi_label_clips_have_sorted_unique_labels() {
        let cfg = SynthConfig {
            clips: 20,
            clip_secs: 0.05,
            classes: 5,
            multi_label: true,
            ..Default::default()
        };
        for c in synth_dataset(&cfg, 1).unwrap() {
            assert!(!c.labels.is_empty() && c.labels.len() <= 3);
            assert!(c.labels.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn samples_stay_in_range() {
        let cfg = SynthConfig {
            classes: 8,
            ..Default::default()
        };
        for k in 0..8 {
            let c = synth_clip(&[k], &cfg, k as u64).unwrap();
            assert!(c.wave.samples.iter().all(|s| s.abs() < 1.0));
        }
        assert!(synth_clip(&[8], &cfg, 0).is_err());
    }
}
