use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference step suited to `f32` evaluation.
pub const DEFAULT_EPS: f32 = 1e-3;

/// `|a - c| / max(|a|, |c|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function against central
/// differences at every coordinate of `x` and returns the largest absolute
/// deviation relative to the larger gradient's max-norm,
/// `max_i |a_i - n_i| / max(|a|_inf, |n|_inf, 1e-8)`. Scaling by the norm
/// keeps near-zero coordinates from turning f32 rounding noise into large
/// ratios. `f` receives a fresh tape with `x` recorded as a leaf and must
/// return a scalar node.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.scalar_f64(out))
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.get(v);

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        // the actually representable step, not the nominal one
        let h = (orig + eps) as f64 - (orig - eps) as f64;
        numeric.push((plus - minus) / h);
    }
    let a = analytic.data();
    let scale = a
        .iter()
        .map(|v| (*v as f64).abs())
        .chain(numeric.iter().map(|v| v.abs()))
        .fold(1e-8, f64::max);
    let worst = a
        .iter()
        .zip(&numeric)
        .map(|(&a, n)| (a as f64 - n).abs())
        .fold(0.0, f64::max);
    Ok(worst / scale)
}
