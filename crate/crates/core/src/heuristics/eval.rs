use serde::{Deserialize, Serialize};

use crate::nn::{Batch, Matrix, ModelState};

use super::{HeuristicError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
}

/// Scores a probability matrix. A single column is `P(class 1)` and predicts
/// class 1 iff `p ≥ 0.5`; otherwise the label counts as within the top `k`
/// when fewer than `k` classes outrank it, equal probabilities ranking by
/// lower class index.
pub fn evaluate_probs(probs: &Matrix, labels: &[usize], k: usize) -> Result<Evaluation> {
    let classes = if probs.cols() == 1 { 2 } else { probs.cols() };
    if k == 0 || k > classes {
        return Err(HeuristicError::InvalidArgument(format!("k = {k} with {classes} classes")));
    }
    if probs.rows() != labels.len() || labels.is_empty() {
        return Err(HeuristicError::InvalidArgument(format!(
            "{} probability rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let rank = |r: usize, y: usize| -> usize {
        if probs.cols() == 1 {
            let predicted = usize::from(probs.get(r, 0) >= 0.5);
            return usize::from(predicted != y);
        }
        let row = probs.row(r);
        let py = row[y];
        row.iter().enumerate().filter(|&(c, &p)| p > py || (p == py && c < y)).count()
    };
    let (mut hit1, mut hitk) = (0usize, 0usize);
    for (r, &y) in labels.iter().enumerate() {
        let place = rank(r, y);
        hit1 += usize::from(place == 0);
        hitk += usize::from(place < k);
    }
    let n = labels.len() as f64;
    Ok(Evaluation { top1: hit1 as f64 / n, topk: hitk as f64 / n, k })
}

/// Eval-mode accuracy of one model on a cohort.
pub fn evaluate(model: &ModelState, cohort: &Batch, k: usize) -> Result<Evaluation> {
    evaluate_probs(&model.predict(&cohort.features)?, &cohort.labels, k)
}

/// Sample-wise mean of the members' eval-mode probabilities, accumulated as a
/// running mean so identical members reproduce their output bit for bit.
pub fn ensemble_probs(models: &[ModelState], features: &Matrix) -> Result<Matrix> {
    let (first, rest) =
        models.split_first().ok_or_else(|| HeuristicError::InvalidArgument("empty ensemble".into()))?;
    let mut mean = first.predict(features)?;
    for (j, m) in rest.iter().enumerate() {
        let p = m.predict(features)?;
        let count = (j + 2) as f64;
        for (acc, v) in mean.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *acc += (v - *acc) / count;
        }
    }
    Ok(mean)
}
