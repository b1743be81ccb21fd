//! Central-difference gradient oracle for tests.

use super::tape::{eval_loss, Graph, Var};
use super::ScoreModelParams;
use crate::error::{Error, Result};

/// One central difference per parameter coordinate.
pub fn finite_diff_gradient<F>(params: &ScoreModelParams, loss: F, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut shifted = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let base = params.flat()[i];
        shifted.flat_mut()[i] = base + step;
        let up = eval_loss(&shifted, &loss)?;
        shifted.flat_mut()[i] = base - step;
        let down = eval_loss(&shifted, &loss)?;
        shifted.flat_mut()[i] = base;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Largest per-coordinate relative error `|a - b| / (max(|a|, |b|) + floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()) + floor))
        .fold(0.0, f64::max)
}
