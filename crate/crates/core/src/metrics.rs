//! Accuracy and mean average precision.
//!
//! Average precision is the mean of the precision at the rank of every
//! positive. Scores are ranked in descending order; equal scores keep their
//! original index order.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Index of the largest entry of each row (first one on ties).
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<usize>> {
    let (n, _) = scores.dims2()?;
    Ok((0..n)
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Average precision of one ranking; `None` when there is no positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| acc / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapReport {
    pub map: f64,
    /// Per-class AP; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// `scores` and `labels` are `(N, C)`; labels hold 0 or 1.
pub fn mean_average_precision(scores: &Tensor, labels: &Tensor) -> Result<MapReport> {
    scores.check_same_shape(labels, "mAP labels")?;
    let (n, c) = scores.dims2()?;
    if !scores.all_finite() {
        return Err(Error::Numeric("non-finite score in mAP input".into()));
    }
    if labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("mAP labels must be 0 or 1"));
    }
    let mut per_class = Vec::with_capacity(c);
    let mut skipped = Vec::new();
    for k in 0..c {
        let s: Vec<f64> = (0..n).map(|i| scores.at(i, k)).collect();
        let l: Vec<bool> = (0..n).map(|i| labels.at(i, k) == 1.0).collect();
        let ap = average_precision(&s, &l);
        if ap.is_none() {
            skipped.push(k);
        }
        per_class.push(ap);
    }
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::invalid("no class has a positive label"));
    }
    Ok(MapReport {
        map: vals.iter().sum::<f64>() / vals.len() as f64,
        per_class,
        skipped,
    })
}
