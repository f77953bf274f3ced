//! Visit-level classification metrics, AUC, DeLong and Fisher tests, and
//! stratification by visit count.

mod delong;
mod fisher;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::CohortRole;

pub use delong::{delong_test, DelongResult};
pub use fisher::{fisher_exact, hypergeometric_table_prob};

/// Operating point: a visit is called positive when `p >= THRESHOLD`.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
    pub sen: f64,
    pub spe: f64,
    pub bacc: f64,
}

/// Sensitivity, specificity and balanced accuracy over individual visits.
pub fn confusion_metrics(preds: &[f64], labels: &[bool], threshold: f64) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "confusion_metrics",
            format!("{} scores, {} labels", preds.len(), labels.len()),
        ));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
    for (&p, &y) in preds.iter().zip(labels) {
        match (y, p >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    if tp + fn_ == 0 || tn + fp == 0 {
        return Err(Error::invalid(
            "confusion_metrics",
            format!(
                "need visits of both classes ({} positive, {} negative)",
                tp + fn_,
                tn + fp
            ),
        ));
    }
    let sen = tp as f64 / (tp + fn_) as f64;
    let spe = tn as f64 / (tn + fp) as f64;
    Ok(Confusion {
        tp,
        fn_,
        tn,
        fp,
        sen,
        spe,
        bacc: (sen + spe) / 2.0,
    })
}

/// Twice the Mann-Whitney statistic: `2 * #(pos > neg) + #(pos == neg)`.
fn doubled_wins(pos: &[f64], neg_sorted: &[f64]) -> u128 {
    pos.iter()
        .map(|&x| {
            let below = neg_sorted.partition_point(|&v| v < x);
            let not_above = neg_sorted.partition_point(|&v| v <= x);
            (2 * below + (not_above - below)) as u128
        })
        .sum()
}

fn split_classes(
    scores: &[f64],
    labels: &[bool],
    op: &'static str,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            op,
            format!("{} scores, {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical(format!("{op}: NaN score")));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| !y)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(op, "both classes must be present"));
    }
    Ok((pos, neg))
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, mut neg) = split_classes(scores, labels, "auc")?;
    neg.sort_by(f64::total_cmp);
    let twice = doubled_wins(&pos, &neg);
    Ok(twice as f64 / (2 * pos.len() * neg.len()) as f64)
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Predictions of one test subject, in visit order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub id: String,
    pub role: CohortRole,
    pub labels: Vec<bool>,
    pub preds: Vec<f64>,
}

impl SubjectPrediction {
    pub fn visits(&self) -> usize {
        self.preds.len()
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.preds.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Flattens the visits of classification-cohort subjects (controls and
/// positives) into score and label vectors.
pub fn visit_level(subjects: &[SubjectPrediction]) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in subjects.iter().filter(|s| s.role.in_classification()) {
        scores.extend_from_slice(&s.preds);
        labels.extend_from_slice(&s.labels);
    }
    (scores, labels)
}

/// One row of the visit-count table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub k_min: usize,
    pub n_control: usize,
    pub n_positive: usize,
    /// `None` when the stratum lacks visits of either class.
    pub metrics: Option<Confusion>,
}

/// Scores the visits of subjects with at least `k_min` visits.
pub fn stratify_by_visits(subjects: &[SubjectPrediction], k_min: usize) -> Result<Stratum> {
    if k_min == 0 {
        return Err(Error::invalid("stratify_by_visits", "k_min must be >= 1"));
    }
    let kept: Vec<SubjectPrediction> = subjects
        .iter()
        .filter(|s| s.role.in_classification() && s.visits() >= k_min)
        .cloned()
        .collect();
    let n_control = kept
        .iter()
        .filter(|s| s.role == CohortRole::Control)
        .count();
    let n_positive = kept.len() - n_control;
    let (scores, labels) = visit_level(&kept);
    let metrics = confusion_metrics(&scores, &labels, THRESHOLD).ok();
    Ok(Stratum {
        k_min,
        n_control,
        n_positive,
        metrics,
    })
}

/// Fraction of positive subjects with at least two visits whose predicted
/// trajectory never decreases.
pub fn monotone_fraction(subjects: &[SubjectPrediction]) -> Option<f64> {
    let pos: Vec<&SubjectPrediction> = subjects
        .iter()
        .filter(|s| s.role == CohortRole::Positive && s.visits() > 1)
        .collect();
    if pos.is_empty() {
        return None;
    }
    Some(pos.iter().filter(|s| s.is_non_decreasing()).count() as f64 / pos.len() as f64)
}
