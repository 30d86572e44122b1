#![allow(dead_code)]

use diffaudio::model::{featurize, Features};
use diffaudio::synth::{synth_clip, synth_dataset, SynthConfig};
use diffaudio::train::Example;
use diffaudio::RunConfig;

/// A model small enough for exhaustive gradient checks.
pub fn tiny_cfg() -> RunConfig {
    let mut c = RunConfig::desk();
    c.encoder.d_model = 16;
    c.encoder.heads = 2;
    c.encoder.ffn_hidden = Some(24);
    c.decoder.layers = 2;
    c.masking.clones = 2;
    c.masking.block_size = 2;
    c.optim.batch_size = 2;
    c.synthetic = SynthConfig {
        clips: 8,
        clip_secs: 0.3,
        ..SynthConfig::default()
    };
    c
}

pub fn features(cfg: &RunConfig, seed: u64) -> Vec<Features> {
    synth_dataset(&cfg.synthetic, seed)
        .unwrap()
        .iter()
        .map(|c| featurize(&c.wave, &cfg.frontend).unwrap())
        .collect()
}

pub fn examples(cfg: &RunConfig, seed: u64) -> Vec<Example> {
    synth_dataset(&cfg.synthetic, seed)
        .unwrap()
        .into_iter()
        .map(|c| Example {
            features: featurize(&c.wave, &cfg.frontend).unwrap(),
            labels: c.labels,
        })
        .collect()
}

pub fn one_clip(cfg: &RunConfig, class: usize, seed: u64) -> Features {
    let c = synth_clip(&[class], &cfg.synthetic, seed).unwrap();
    featurize(&c.wave, &cfg.frontend).unwrap()
}
