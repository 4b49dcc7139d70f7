// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("AUC needs at least one positive and one negative label ({positives} positive, {negatives} negative)")]
pub struct DegenerateLabels {
    pub positives: usize,
    pub negatives: usize,
}

fn split(predictions: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>), DegenerateLabels> {
    assert_eq!(predictions.len(), labels.len(), "one label per prediction");
    let pos: Vec<f64> = predictions.iter().zip(labels).filter(|(_, &l)| l).map(|(&p, _)| p).collect();
    let neg: Vec<f64> = predictions.iter().zip(labels).filter(|(_, &l)| !l).map(|(&p, _)| p).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(DegenerateLabels {
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    Ok((pos, neg))
}

/// Exact AUC: the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn oracle_auc(predictions: &[f64], labels: &[bool]) -> Result<f64, DegenerateLabels> {
    let (pos, neg) = split(predictions, labels)?;
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

/// Area under the ROC curve traced by sweeping the threshold over every
/// distinct prediction value, integrated with the trapezoid rule.
pub fn trapezoid_auc(predictions: &[f64], labels: &[bool]) -> Result<f64, DegenerateLabels> {
    let (pos, neg) = split(predictions, labels)?;
    let mut scored: Vec<(f64, bool)> = predictions.iter().copied().zip(labels.iter().copied()).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / np, fp / nn);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}
