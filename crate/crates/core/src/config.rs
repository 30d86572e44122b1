//! Run configuration: every model, masking, objective and optimiser knob.
//!
//! Configs are JSON. Unknown keys are rejected at every level; missing keys
//! take the `desk` preset's value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::{ClsPosition, EncoderConfig};
use crate::error::{Error, Result};
use crate::frontend::FbankConfig;
use crate::objective::ObjectiveConfig;
use crate::optim::OptimConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub fbank: FbankConfig,
    pub patch: usize,
    /// Learnable 3x3 convolution over the spectrogram before patching.
    pub front_conv: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            fbank: FbankConfig {
                normalize: true,
                ..FbankConfig::default()
            },
            patch: 16,
            front_conv: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub ratio: f64,
    pub block_size: usize,
    pub clones: usize,
    /// Ratio of tokens dropped during fine-tuning.
    pub finetune_ratio: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            block_size: 5,
            clones: 4,
            finetune_ratio: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub masking: MaskingConfig,
    pub decoder: DecoderConfig,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub synthetic: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Full-scale hyper-parameters.
    pub fn paper() -> Self {
        Self {
            seed: 0,
            frontend: FrontendConfig::default(),
            encoder: EncoderConfig {
                layers: 12,
                d_model: 768,
                heads: 8,
                lambda: 0.3,
                ffn_hidden: None,
                cls_position: ClsPosition::Head,
                final_norm: true,
                scale_dim: None,
            },
            masking: MaskingConfig {
                clones: 16,
                ..MaskingConfig::default()
            },
            decoder: DecoderConfig::default(),
            objective: ObjectiveConfig::default(),
            optim: OptimConfig {
                total_epochs: 20.0,
                batch_size: 48,
                ..OptimConfig::default()
            },
            synthetic: SynthConfig::default(),
        }
    }

    /// Laptop-scale model for tests and toy runs.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            frontend: FrontendConfig::default(),
            encoder: EncoderConfig {
                layers: 2,
                d_model: 64,
                heads: 4,
                lambda: 0.3,
                ffn_hidden: None,
                cls_position: ClsPosition::Head,
                final_norm: true,
                scale_dim: None,
            },
            masking: MaskingConfig::default(),
            decoder: DecoderConfig::default(),
            objective: ObjectiveConfig::default(),
            optim: OptimConfig {
                total_epochs: 5.0,
                batch_size: 4,
                finetune_lr: Some(2e-3),
                ..OptimConfig::default()
            },
            synthetic: SynthConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.fbank.validate()?;
        let patch = self.frontend.patch;
        if patch == 0 || !self.frontend.fbank.n_mels.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "patch size {patch} must divide n_mels {}",
                self.frontend.fbank.n_mels
            )));
        }
        self.encoder.validate()?;
        if !self.encoder.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even for sinusoidal positions".into()));
        }
        self.decoder.validate(self.encoder.d_model)?;
        let m = &self.masking;
        for (what, r) in [("mask ratio", m.ratio), ("fine-tune mask ratio", m.finetune_ratio)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{what} must lie in [0, 1), got {r}")));
            }
        }
        if m.block_size == 0 || m.clones == 0 {
            return Err(Error::Config("block_size and clones must be at least 1".into()));
        }
        self.objective.validate()?;
        self.optim.validate()?;
        self.synthetic.validate()?;
        if self.synthetic.sample_rate != self.frontend.fbank.sample_rate {
            return Err(Error::Config("synthetic sample rate differs from the fbank rate".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Optimiser steps for `n_clips` clips over the configured epochs.
    pub fn steps_for(&self, n_clips: usize) -> usize {
        let per_epoch = n_clips as f64 / self.optim.batch_size as f64;
        (self.optim.total_epochs * per_epoch).ceil().max(1.0) as usize
    }
}
