//! Accuracy and threshold-free AUROC.
//!
//! [`auroc`] is the Mann-Whitney statistic with midranks for ties;
//! [`auroc_bruteforce`] enumerates every positive/negative pair and serves as
//! its oracle. Both accumulate in integers (twice the statistic) so they agree
//! exactly.

use crate::error::{Error, Result};
use crate::model::Prediction;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub label: usize,
}

pub fn records(preds: &[Prediction], labels: &[u8]) -> Vec<EvalRecord> {
    preds
        .iter()
        .zip(labels)
        .map(|(p, &label)| EvalRecord {
            scores: p.probs.clone(),
            predicted: p.label(),
            label: label as usize,
        })
        .collect()
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("evaluation records"));
    }
    let correct = records.iter().filter(|r| r.predicted == r.label).count();
    Ok(correct as f64 / records.len() as f64)
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "auroc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auroc scores"));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, with 1-based midranks.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let twice_midrank = (start + 1 + end) as u128;
        let positives = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        twice_rank_sum += twice_midrank * positives;
        start = end;
    }
    let pos = pos as u128;
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg as u128) as f64)
}

/// Pairwise reference implementation of [`auroc`]; quadratic in the input.
pub fn auroc_bruteforce(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let of_class = |class: bool| {
        scores
            .iter()
            .zip(labels)
            .filter(move |(_, &l)| l == class)
            .map(|(&s, _)| s)
    };
    let mut twice_wins: u128 = 0;
    for sp in of_class(true) {
        for sn in of_class(false) {
            if sp > sn {
                twice_wins += 2;
            } else if sp == sn {
                twice_wins += 1;
            }
        }
    }
    Ok(twice_wins as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// AUROC of binary-head records using the positive-class score.
pub fn records_auroc(records: &[EvalRecord]) -> Result<f64> {
    let scores: Vec<f64> = records
        .iter()
        .map(|r| match r.scores.as_slice() {
            [p] | [_, p] => Ok(*p),
            _ => Err(Error::Config("AUROC needs a binary head".into())),
        })
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = records.iter().map(|r| r.label == 1).collect();
    auroc(&scores, &labels)
}
