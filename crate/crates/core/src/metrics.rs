//! Evaluation metrics: top-1 accuracy for the utility task, per-attribute
//! average precision / cMAP / macro-F1 for privacy leakage.
//!
//! Conventions (fixed and recorded in run manifests): argmax ties break to
//! the lowest class index; AP ranks by descending score with ties in stable
//! input order; attributes with zero positives are excluded from cMAP with a
//! warning; F1 uses threshold 0.5 (score >= threshold counts positive, 0/0
//! ratios count as 0) and is macro-averaged.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Probe trained and evaluated on the anonymizer's training distribution.
    KnownData,
    /// Probe evaluated on a freshly generated dataset.
    NovelData,
    /// Privacy probe trained on raw data, evaluated on anonymized data.
    RawPretrainedProbe,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Protocol::KnownData => "known-data",
            Protocol::NovelData => "novel-data",
            Protocol::RawPretrainedProbe => "raw-pretrained-probe",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub top1: Option<f64>,
    pub per_attribute_ap: Vec<f64>,
    pub cmap: Option<f64>,
    pub f1: Option<f64>,
    pub n_eval: usize,
    pub config_digest: String,
    /// Attributes dropped from cMAP for having no positive sample.
    pub excluded_attributes: Vec<usize>,
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn top1(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::invalid("top1", "empty or mismatched inputs"));
    }
    let mut hits = 0usize;
    for (row, &label) in logits.iter().zip(labels) {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Average precision: mean over positives of precision at each positive
/// rank, ranking by descending score, ties in stable input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid("average-precision", "empty or mismatched inputs"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::invalid("average-precision", "no positive labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut seen_pos = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] {
            seen_pos += 1;
            ap += seen_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

pub struct CmapOutcome {
    pub cmap: f64,
    pub per_attribute: Vec<f64>,
    pub excluded: Vec<usize>,
}

/// Mean over attributes of per-attribute AP. `scores[k][i]` is the score of
/// sample i for attribute k; `labels[i][k]` is its multi-hot truth.
/// Attributes with zero positives are excluded (logged in the outcome); if
/// every attribute is excluded this is an error.
pub fn cmap(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<CmapOutcome> {
    let k = scores.len();
    if k == 0 {
        return Err(Error::invalid("cmap", "no attributes"));
    }
    let mut per_attribute = vec![f64::NAN; k];
    let mut excluded = Vec::new();
    let mut total = 0.0;
    let mut counted = 0usize;
    for attr in 0..k {
        let lab: Vec<bool> = labels.iter().map(|row| row[attr]).collect();
        if lab.iter().all(|&l| !l) {
            excluded.push(attr);
            continue;
        }
        let ap = average_precision(&scores[attr], &lab)?;
        per_attribute[attr] = ap;
        total += ap;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::invalid("cmap", "every attribute lacks positives"));
    }
    Ok(CmapOutcome { cmap: total / counted as f64, per_attribute, excluded })
}

/// Macro F1 at a fixed threshold. Scores at or above the threshold predict
/// positive; degenerate 0/0 precision or recall counts as 0.
pub fn macro_f1(scores: &[Vec<f64>], labels: &[Vec<bool>], threshold: f64) -> Result<f64> {
    let k = scores.len();
    if k == 0 {
        return Err(Error::invalid("macro-f1", "no attributes"));
    }
    let mut total = 0.0;
    for attr in 0..k {
        let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
        for (i, s) in scores[attr].iter().enumerate() {
            let pred = *s >= threshold;
            let truth = labels[i][attr];
            match (pred, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fne == 0 { 0.0 } else { tp as f64 / (tp + fne) as f64 };
        let f1 =
            if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        total += f1;
    }
    Ok(total / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{coin, stream_rng, uniform};

    // Sort-free O(n^2) AP: rank of i = 1 + #{j: score_j > score_i, or equal
    // score with j < i}. The reference the fast path is checked against.
    fn ap_reference(scores: &[f64], labels: &[bool]) -> f64 {
        let n = scores.len();
        let rank = |i: usize| -> usize {
            1 + (0..n)
                .filter(|&j| {
                    scores[j] > scores[i] || (scores[j] == scores[i] && j < i)
                })
                .count()
        };
        let mut ap = 0.0;
        let mut n_pos = 0;
        for i in 0..n {
            if !labels[i] {
                continue;
            }
            n_pos += 1;
            let ri = rank(i);
            let above = (0..n).filter(|&j| labels[j] && rank(j) <= ri).count();
            ap += above as f64 / ri as f64;
        }
        ap / n_pos as f64
    }

    #[test]
    fn top1_cases() {
        let all_right = vec![vec![2.0, 1.0], vec![0.0, 3.0]];
        assert_eq!(top1(&all_right, &[0, 1]).unwrap(), 1.0);

        // all-zero logits tie-break to class 0
        let zeros = vec![vec![0.0; 4]; 8];
        let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
        assert_eq!(top1(&zeros, &labels).unwrap(), 0.25);

        assert!(top1(&[], &[]).is_err());
    }

    #[test]
    fn average_precision_cases() {
        // perfect ranking
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(),
            1.0
        );
        // labels [1,0,1], scores [0.9,0.8,0.7] -> (1 + 2/3)/2
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        // single positive ranked last of 4
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap();
        assert!((ap - 0.25).abs() < 1e-15);
        // zero positives rejected
        assert!(average_precision(&[0.5], &[false]).is_err());
    }

    #[test]
    fn ap_ties_use_stable_input_order() {
        // equal scores: earlier index ranks first
        let ap = average_precision(&[0.5, 0.5], &[false, true]).unwrap();
        assert!((ap - 0.5).abs() < 1e-15);
        let ap = average_precision(&[0.5, 0.5], &[true, false]).unwrap();
        assert!((ap - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ap_and_cmap_match_reference_on_random_instances() {
        let mut rng = stream_rng(31, 0, 0);
        for case in 0..100 {
            let n = 3 + (case % 17);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // quantized scores so ties actually occur
                    (uniform(&mut rng) * 8.0).floor() / 8.0
                })
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| coin(&mut rng)).collect();
            if labels.iter().all(|&l| !l) {
                labels[0] = true;
            }
            let fast = average_precision(&scores, &labels).unwrap();
            let slow = ap_reference(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn cmap_mean_and_exclusion() {
        let scores = vec![vec![0.9, 0.1, 0.8], vec![0.2, 0.9, 0.1]];
        let labels = vec![
            vec![true, false],
            vec![false, true],
            vec![true, false],
        ];
        let out = cmap(&scores, &labels).unwrap();
        assert!(out.excluded.is_empty());
        assert!((out.cmap - (out.per_attribute[0] + out.per_attribute[1]) / 2.0).abs() < 1e-15);

        // attribute 1 has no positives -> excluded, cmap over the rest
        let labels2 = vec![
            vec![true, false],
            vec![false, false],
            vec![true, false],
        ];
        let out2 = cmap(&scores, &labels2).unwrap();
        assert_eq!(out2.excluded, vec![1]);
        assert_eq!(out2.cmap, out2.per_attribute[0]);

        // all excluded -> error
        let labels3 = vec![vec![false, false]; 3];
        assert!(cmap(&scores, &labels3).is_err());
    }

    #[test]
    fn cmap_random_scores_sit_near_base_rate() {
        let mut rng = stream_rng(32, 0, 0);
        let n = 1000;
        let scores = vec![(0..n).map(|_| uniform(&mut rng)).collect::<Vec<f64>>()];
        let labels: Vec<Vec<bool>> = (0..n).map(|_| vec![coin(&mut rng)]).collect();
        let out = cmap(&scores, &labels).unwrap();
        assert!((out.cmap - 0.5).abs() < 0.05, "{}", out.cmap);
    }

    #[test]
    fn macro_f1_cases() {
        // perfect predictions
        let scores = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        let labels = vec![vec![true, false], vec![false, true]];
        assert_eq!(macro_f1(&scores, &labels, 0.5).unwrap(), 1.0);

        // all negative predictions with positives present -> 0
        let scores = vec![vec![0.1, 0.1]];
        let labels = vec![vec![true], vec![true]];
        assert_eq!(macro_f1(&scores, &labels, 0.5).unwrap(), 0.0);

        // tp=2 fp=1 fn=1 -> 2/3
        let scores = vec![vec![0.9, 0.9, 0.9, 0.1, 0.1]];
        let labels = vec![vec![true], vec![true], vec![false], vec![true], vec![false]];
        let f1 = macro_f1(&scores, &labels, 0.5).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_are_order_stable_under_permutation() {
        let mut rng = stream_rng(33, 0, 0);
        let n = 40;
        let scores: Vec<f64> = (0..n).map(|_| uniform(&mut rng)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| coin(&mut rng)).collect();
        labels[0] = true;
        let base = average_precision(&scores, &labels).unwrap();

        // distinct scores: any permutation leaves AP unchanged
        let mut perm: Vec<usize> = (0..n).collect();
        crate::rng::shuffle(&mut rng, &mut perm);
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let pl: Vec<bool> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = average_precision(&ps, &pl).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }
}
