use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::CohortRole;
use crate::rng;

/// Subject indices of the validation set and of each cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub validation: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

impl Split {
    /// Training subjects of fold `k`: every other fold.
    pub fn train_indices(&self, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

const ROLES: [CohortRole; 3] = [
    CohortRole::Control,
    CohortRole::Positive,
    CohortRole::ConsistencyOnly,
];

/// Stratified split. The validation set (`round(val_frac * n)` subjects) is
/// drawn first, apportioned over roles by largest remainder; the rest is
/// dealt round-robin into `k` folds role by role, so fold sizes and per-role
/// counts differ by at most one.
pub fn split(roles: &[CohortRole], k: usize, val_frac: f64, seed: u64) -> Result<Split> {
    if k < 2 {
        return Err(Error::config("split.folds", "need at least 2 folds"));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::config("split.val_frac", "must be in [0, 1)"));
    }
    let mut rng = rng::stream(seed, "split", 0);
    let mut by_role: Vec<Vec<usize>> = ROLES
        .iter()
        .map(|r| {
            let mut idx: Vec<usize> = (0..roles.len()).filter(|&i| roles[i] == *r).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();

    let n = roles.len();
    let n_val = (val_frac * n as f64).round() as usize;
    let quotas: Vec<f64> = by_role.iter().map(|g| val_frac * g.len() as f64).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ROLES.len()).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let mut missing = n_val.saturating_sub(take.iter().sum());
    for &r in order.iter().cycle().take(3 * ROLES.len()) {
        if missing == 0 {
            break;
        }
        if take[r] < by_role[r].len() {
            take[r] += 1;
            missing -= 1;
        }
    }

    let mut validation = Vec::with_capacity(n_val);
    for (g, &t) in by_role.iter_mut().zip(&take) {
        validation.extend(g.drain(..t));
    }
    validation.sort_unstable();

    let remaining: usize = by_role.iter().map(Vec::len).sum();
    if k > remaining {
        return Err(Error::config(
            "split.folds",
            format!("{k} folds but only {remaining} subjects outside validation"),
        ));
    }
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for g in &by_role {
        for &i in g {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(Split { validation, folds })
}
