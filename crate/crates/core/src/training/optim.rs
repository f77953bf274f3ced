use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    #[serde(serialize_with = "crate::short_f32")]
    pub lr: f32,
    #[serde(serialize_with = "crate::short_f32")]
    pub beta1: f32,
    #[serde(serialize_with = "crate::short_f32")]
    pub beta2: f32,
    #[serde(serialize_with = "crate::short_f32")]
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be a finite value > 0"));
        }
        for (name, b) in [
            ("optimizer.beta1", self.beta1),
            ("optimizer.beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must be in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be > 0"));
        }
        Ok(())
    }
}

/// First and second moment accumulators, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. `None` gradients mark frozen tensors,
/// which are left untouched together with their moments.
pub fn optimizer_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("gradient {i} is {:?}, parameter {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter {i}"
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g as f64;
            let mn = b1 * *m as f64 + (1.0 - b1) * g;
            let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = cfg.lr as f64 * (mn / c1) / ((vn / c2).sqrt() + cfg.eps as f64);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}
