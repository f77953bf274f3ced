//! Classification loss, monotonicity penalty, weight decay and their sum.
//!
//! Each term exists twice: a plain `f64` evaluation over finished
//! predictions, and a tape version used for training. Batch losses are
//! averaged over the subjects of the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Predictions are clamped to `[CLAMP, 1 - CLAMP]` before taking logs.
pub const CLAMP: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortRole {
    Control,
    Positive,
    /// Labelled positive, but only constrained by the consistency loss.
    ConsistencyOnly,
}

impl CohortRole {
    pub fn label(self) -> bool {
        !matches!(self, CohortRole::Control)
    }

    pub fn in_classification(self) -> bool {
        !matches!(self, CohortRole::ConsistencyOnly)
    }

    pub fn in_consistency(self) -> bool {
        !matches!(self, CohortRole::Control)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(serialize_with = "crate::short_f32")]
    pub lambda_cons: f32,
    #[serde(serialize_with = "crate::short_f32")]
    pub lambda_reg: f32,
    /// Weight of positive-label terms in the entropy.
    #[serde(serialize_with = "crate::short_f32")]
    pub w_pos: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cons: 2.0,
            lambda_reg: 0.02,
            w_pos: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cons >= 0.0 && self.lambda_cons.is_finite()) {
            return Err(Error::config(
                "loss.lambda_cons",
                "must be a finite value >= 0",
            ));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::config(
                "loss.lambda_reg",
                "must be a finite value >= 0",
            ));
        }
        if !(self.w_pos > 0.0 && self.w_pos.is_finite()) {
            return Err(Error::config("loss.w_pos", "must be a finite value > 0"));
        }
        Ok(())
    }
}

/// Negative-label visits over positive-label visits, the default `w_pos`.
/// Falls back to 1 when either class is absent.
pub fn balanced_w_pos(labels: impl IntoIterator<Item = bool>) -> f32 {
    let (mut pos, mut neg) = (0usize, 0usize);
    for y in labels {
        if y {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    if pos == 0 || neg == 0 {
        1.0
    } else {
        neg as f32 / pos as f32
    }
}

fn check_probability(p: f64) -> Result<f64> {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return Err(Error::Numerical(format!(
            "prediction {p} is outside (0, 1)"
        )));
    }
    Ok(p.clamp(CLAMP as f64, 1.0 - CLAMP as f64))
}

/// `E = sum_t (w_pos y_t ln p_t + (1 - y_t) ln(1 - p_t))`; note `E <= 0`.
pub fn weighted_bce(p: &[f64], y: &[bool], w_pos: f64) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::shape(
            "weighted_bce",
            format!("{} predictions, {} labels", p.len(), y.len()),
        ));
    }
    let mut e = 0.0;
    for (&p, &y) in p.iter().zip(y) {
        let p = check_probability(p)?;
        e += if y { w_pos * p.ln() } else { (1.0 - p).ln() };
    }
    Ok(e)
}

/// Hinge penalty on decreasing consecutive predictions of one sequence.
pub fn sequence_violation(p: &[f64]) -> f64 {
    p.windows(2).map(|w| (w[0] - w[1]).max(0.0)).sum()
}

/// `L_cons` summed over positive and consistency-only subjects.
pub fn consistency_loss(sequences: &[&[f64]], roles: &[CohortRole]) -> f64 {
    sequences
        .iter()
        .zip(roles)
        .filter(|(_, r)| r.in_consistency())
        .map(|(s, _)| sequence_violation(s))
        .sum()
}

/// Squared L2 norm of the recurrent, fusion, encoder FC and head weights.
pub fn l2_penalty(params: &ModelParams) -> f64 {
    params
        .tensors
        .iter()
        .enumerate()
        .filter(|&(i, _)| params.group(i).is_penalized())
        .map(|(_, t)| t.sum_squares())
        .sum()
}

/// `L = -E + lambda_cons L_cons + lambda_reg penalty`
pub fn total_objective(e: f64, l_cons: f64, penalty: f64, w: &LossWeights) -> f64 {
    -e + w.lambda_cons as f64 * l_cons + w.lambda_reg as f64 * penalty
}

// ---- tape versions -------------------------------------------------------------

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    match terms {
        [] => {
            let z = tape_zero(tape);
            Ok(tape.sum(z))
        }
        [one] => Ok(tape.sum(*one)),
        _ => {
            let cat = tape.concat(terms, 0)?;
            Ok(tape.sum(cat))
        }
    }
}

fn tape_zero(tape: &mut Tape) -> Var {
    tape.leaf(crate::Tensor::scalar(0.0))
}

/// Tape form of [`weighted_bce`] for one subject's `[1]` prediction nodes.
pub fn weighted_bce_tape(tape: &mut Tape, preds: &[Var], y: &[bool], w_pos: f32) -> Result<Var> {
    if preds.len() != y.len() {
        return Err(Error::shape(
            "weighted_bce",
            format!("{} predictions, {} labels", preds.len(), y.len()),
        ));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (&p, &y) in preds.iter().zip(y) {
        check_probability(tape.scalar(p) as f64)?;
        let p = tape.clamp(p, CLAMP, 1.0 - CLAMP);
        terms.push(if y {
            let l = tape.ln(p);
            tape.scale(l, w_pos)
        } else {
            let q = tape.affine(p, -1.0, 1.0);
            tape.ln(q)
        });
    }
    sum_scalars(tape, &terms)
}

/// Tape form of [`sequence_violation`].
pub fn sequence_violation_tape(tape: &mut Tape, preds: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(preds.len().saturating_sub(1));
    for w in preds.windows(2) {
        let d = tape.sub(w[0], w[1])?;
        terms.push(tape.hinge_pos(d));
    }
    sum_scalars(tape, &terms)
}

/// Tape form of [`l2_penalty`] over parameter leaves bound in layout order.
pub fn l2_penalty_tape(tape: &mut Tape, params: &ModelParams, vars: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, &v) in vars.iter().enumerate() {
        if !params.group(i).is_penalized() {
            continue;
        }
        let s = tape.sum_squares(v);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => {
            let z = tape_zero(tape);
            tape.sum(z)
        }
    })
}

/// One subject's predictions and cohort role inside a batch.
#[derive(Clone, Debug)]
pub struct SubjectPreds {
    pub preds: Vec<Var>,
    pub role: CohortRole,
}

/// Scalar nodes of a batch objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    /// `-E` averaged over subjects.
    pub neg_entropy: Var,
    /// `L_cons` averaged over subjects.
    pub consistency: Var,
    pub penalty: Var,
    pub total: Var,
}

/// Values of the objective terms, read back from a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveValues {
    pub neg_entropy: f64,
    pub consistency: f64,
    pub penalty: f64,
    pub total: f64,
}

impl ObjectiveVars {
    pub fn values(&self, tape: &Tape) -> ObjectiveValues {
        ObjectiveValues {
            neg_entropy: tape.scalar_f64(self.neg_entropy),
            consistency: tape.scalar_f64(self.consistency),
            penalty: tape.scalar_f64(self.penalty),
            total: tape.scalar_f64(self.total),
        }
    }
}

/// Eq. 6 over a batch, plus the (unaveraged) weight penalty. The entropy is
/// averaged over the classification subjects of the batch, the consistency
/// term over all of its subjects.
pub fn batch_objective(
    tape: &mut Tape,
    subjects: &[SubjectPreds],
    penalty: Var,
    w: &LossWeights,
) -> Result<ObjectiveVars> {
    if subjects.is_empty() {
        return Err(Error::invalid("objective", "empty batch"));
    }
    let inv = 1.0 / subjects.len() as f32;
    let mut entropy = Vec::new();
    let mut cons = Vec::new();
    for s in subjects {
        if s.role.in_classification() {
            let y = vec![s.role.label(); s.preds.len()];
            entropy.push(weighted_bce_tape(tape, &s.preds, &y, w.w_pos)?);
        }
        if s.role.in_consistency() && s.preds.len() > 1 {
            cons.push(sequence_violation_tape(tape, &s.preds)?);
        }
    }
    let e = add_all(tape, &entropy)?;
    let neg_entropy = tape.scale(e, -1.0 / entropy.len().max(1) as f32);
    let c = add_all(tape, &cons)?;
    let consistency = tape.scale(c, inv);
    let total = combine(tape, neg_entropy, consistency, penalty, w)?;
    Ok(ObjectiveVars {
        neg_entropy,
        consistency,
        penalty,
        total,
    })
}

fn add_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let Some(&first) = it.next() else {
        let z = tape_zero(tape);
        return Ok(tape.sum(z));
    };
    let mut acc = first;
    for &t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Tape form of [`total_objective`] taking `-E` directly.
pub fn combine(
    tape: &mut Tape,
    neg_entropy: Var,
    consistency: Var,
    penalty: Var,
    w: &LossWeights,
) -> Result<Var> {
    let c = tape.scale(consistency, w.lambda_cons);
    let r = tape.scale(penalty, w.lambda_reg);
    let a = tape.add(neg_entropy, c)?;
    tape.add(a, r)
}
