use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{auc, split_classes};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    /// Estimated variance of `auc_a - auc_b`.
    pub variance: f64,
    pub z: f64,
    /// Two-sided p-value from the standard normal.
    pub p: f64,
}

fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// Placement values: for each positive, the fraction of negatives it beats;
/// for each negative, the fraction of positives that beat it.
fn placements(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let v10 = pos
        .iter()
        .map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64)
        .collect();
    let v01 = neg
        .iter()
        .map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64)
        .collect();
    (v10, v01)
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n - 1) as f64
}

/// DeLong's test for two correlated ROC curves on the same samples.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DelongResult> {
    if scores_a.len() != scores_b.len() || scores_a.len() != labels.len() {
        return Err(Error::shape(
            "delong_test",
            format!(
                "lengths {} / {} / {}",
                scores_a.len(),
                scores_b.len(),
                labels.len()
            ),
        ));
    }
    let (pa, na) = split_classes(scores_a, labels, "delong_test")?;
    let (pb, nb) = split_classes(scores_b, labels, "delong_test")?;
    let (a10, a01) = placements(&pa, &na);
    let (b10, b01) = placements(&pb, &nb);
    let auc_a = auc(scores_a, labels)?;
    let auc_b = auc(scores_b, labels)?;
    let (m, n) = (pa.len() as f64, na.len() as f64);
    let s10 = cov(&a10, &a10) + cov(&b10, &b10) - 2.0 * cov(&a10, &b10);
    let s01 = cov(&a01, &a01) + cov(&b01, &b01) - 2.0 * cov(&a01, &b01);
    let variance = (s10 / m + s01 / n).max(0.0);
    let diff = auc_a - auc_b;
    let (z, p) = if variance == 0.0 {
        if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let z = diff / variance.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (z, (2.0 * normal.cdf(-z.abs())).min(1.0))
    };
    Ok(DelongResult {
        auc_a,
        auc_b,
        variance,
        z,
        p,
    })
}
