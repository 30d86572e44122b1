//! Dataset manifests and feature loading.
//!
//! A manifest is a text file with one clip per line: a WAV path (relative
//! paths resolve against the manifest's directory), optionally followed by
//! whitespace and comma-separated class indices. Blank lines and lines
//! starting with `#` are skipped.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::frontend::load_wav;
use crate::model::{featurize, Features};
use crate::synth::synth_dataset;
use crate::train::Example;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub labels: Vec<usize>,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let file = parts.next().expect("non-empty line");
        let labels = match parts.next() {
            Some(l) => l
                .split(',')
                .map(|x| {
                    x.parse::<usize>()
                        .map_err(|_| Error::Parse(format!("manifest line {}: bad label `{x}`", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        if parts.next().is_some() {
            return Err(Error::Parse(format!("manifest line {}: too many fields", n + 1)));
        }
        let p = Path::new(file);
        out.push(ManifestEntry {
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            labels,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Loads and featurises every entry in parallel.
pub fn load_examples(entries: &[ManifestEntry], cfg: &RunConfig) -> Result<Vec<Example>> {
    entries
        .par_iter()
        .map(|e| {
            let w = load_wav(&e.path)?;
            Ok(Example {
                features: featurize(&w, &cfg.frontend)?,
                labels: e.labels.clone(),
            })
        })
        .collect()
}

/// The configured synthetic dataset, featurised.
pub fn synthetic_examples(cfg: &RunConfig, seed: u64) -> Result<Vec<Example>> {
    synth_dataset(&cfg.synthetic, seed)?
        .into_par_iter()
        .map(|c| {
            Ok(Example {
                features: featurize(&c.wave, &cfg.frontend)?,
                labels: c.labels,
            })
        })
        .collect()
}

pub fn features_of(examples: Vec<Example>) -> Vec<Features> {
    examples.into_iter().map(|e| e.features).collect()
}

/// One more than the largest label.
pub fn infer_classes(examples: &[Example]) -> Result<usize> {
    examples
        .iter()
        .flat_map(|e| e.labels.iter())
        .max()
        .map(|m| m + 1)
        .ok_or_else(|| Error::invalid("no labels in dataset"))
}
