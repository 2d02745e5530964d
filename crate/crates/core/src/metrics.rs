//! Evaluation measures: ROC-AUC, F1, top-1 and multi-view combination.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Probability that a random positive outranks a random negative, ties
/// counting one half. `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // twice the Mann–Whitney U, kept integral so ties stay exact
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p_g, mut n_g) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p_g += 1;
            } else {
                n_g += 1;
            }
            j += 1;
        }
        u2 += p_g * (2 * neg_below + n_g);
        neg_below += n_g;
        i = j;
    }
    Ok(Some(u2 as f64 / (2 * pos * neg) as f64))
}

/// `2PR / (P + R)` with predictions `score >= threshold`; zero when
/// `P + R == 0`. Evaluated as `2TP / (2TP + FP + FN)`, the same ratio with
/// a single rounding.
pub fn f1(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok((2 * tp) as f64 / (2 * tp + fp + fn_) as f64)
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "metric",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("metric scores contain NaN"));
    }
    Ok(())
}

/// Element-wise maximum over per-view probability vectors.
pub fn combine_views(views: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = views
        .first()
        .ok_or_else(|| Error::invalid("combine_views needs at least one view"))?;
    let mut out = first.clone();
    for v in &views[1..] {
        if v.len() != out.len() {
            return Err(Error::shape(
                "combine_views",
                format!("view of length {} vs {}", v.len(), out.len()),
            ));
        }
        for (a, &b) in out.iter_mut().zip(v) {
            *a = a.max(b);
        }
    }
    Ok(out)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    /// Absent when the split holds only one class for this label.
    pub auc: Option<f64>,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n_samples: usize,
    /// Single-label tasks only.
    pub top1: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    /// Mean over labels with a defined AUC.
    pub macro_auc: Option<f64>,
    pub macro_f1: f64,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_version: Option<String>,
}

impl MetricsReport {
    /// Metrics from per-sample probability vectors and binary targets.
    pub fn from_predictions(
        split: &str,
        label_names: &[String],
        probs: &[Vec<f64>],
        targets: &[Vec<f64>],
        single_label: bool,
    ) -> Result<Self> {
        if probs.len() != targets.len() {
            return Err(Error::shape("metrics", "prediction and target counts differ"));
        }
        let c = label_names.len();
        if let Some(bad) = probs.iter().chain(targets).find(|v| v.len() != c) {
            return Err(Error::shape("metrics", format!("vector of length {} for {c} labels", bad.len())));
        }
        let mut per_class = Vec::with_capacity(c);
        for (j, label) in label_names.iter().enumerate() {
            let scores: Vec<f64> = probs.iter().map(|p| p[j]).collect();
            let labels: Vec<bool> = targets.iter().map(|t| t[j] > 0.5).collect();
            per_class.push(ClassMetrics {
                label: label.clone(),
                auc: roc_auc(&scores, &labels)?,
                f1: f1(&scores, &labels, DEFAULT_THRESHOLD)?,
            });
        }
        let aucs: Vec<f64> = per_class.iter().filter_map(|m| m.auc).collect();
        let macro_auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
        let macro_f1 = if c == 0 {
            0.0
        } else {
            per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64
        };
        let top1 = (single_label && !probs.is_empty()).then(|| {
            let hits = probs
                .iter()
                .zip(targets)
                .filter(|(p, t)| t[argmax(p)] > 0.5)
                .count();
            hits as f64 / probs.len() as f64
        });
        Ok(Self {
            split: split.to_string(),
            n_samples: probs.len(),
            top1,
            per_class,
            macro_auc,
            macro_f1,
            loss_history: Vec::new(),
            model_version: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &b(&[0, 0, 1, 1])).unwrap(), Some(1.0));
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &b(&[0, 0, 1, 1])).unwrap(), Some(0.0));
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &b(&[0, 0, 1, 1])).unwrap(), Some(0.75));
        assert_eq!(roc_auc(&[0.5, 0.5], &b(&[0, 1])).unwrap(), Some(0.5));
        assert_eq!(roc_auc(&[0.3, 0.6], &b(&[1, 1])).unwrap(), None);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[0.9, 0.1], &b(&[1, 0]), 0.5).unwrap(), 1.0);
        assert_eq!(f1(&[0.1, 0.2], &b(&[1, 0]), 0.5).unwrap(), 0.0);
        // TP=2, FP=1, FN=1
        let v = f1(&[0.9, 0.8, 0.7, 0.1, 0.2], &b(&[1, 1, 0, 1, 0]), 0.5).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine_views(&[vec![0.2, 0.9]]).unwrap(), vec![0.2, 0.9]);
        assert_eq!(
            combine_views(&[vec![0.2, 0.9], vec![0.7, 0.1]]).unwrap(),
            vec![0.7, 0.9]
        );
        assert_eq!(
            combine_views(&[vec![0.2, 0.9], vec![0.7, 0.1], vec![0.1, 0.95]]).unwrap(),
            vec![0.7, 0.95]
        );
        assert!(combine_views(&[]).is_err());
        assert!(combine_views(&[vec![0.1], vec![0.1, 0.2]]).is_err());
    }

    #[test]
    fn report_fields() {
        let names = vec!["a".to_string(), "b".to_string()];
        let probs = vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.6, 0.4]];
        let targets = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let r = MetricsReport::from_predictions("test", &names, &probs, &targets, true).unwrap();
        assert_eq!(r.top1, Some(2.0 / 3.0));
        assert_eq!(r.per_class[0].auc, Some(1.0));
        assert_eq!(r.n_samples, 3);
    }
}
