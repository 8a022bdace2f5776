//! Central finite differences against analytic gradients.

use crate::error::Result;
use crate::model::{LossValue, Model};

/// Numerical gradient of `loss` at the model's current parameters.
pub fn finite_difference<F>(model: &Model, h: f64, mut loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&Model) -> Result<LossValue>,
{
    let base = model.params().to_vec();
    let mut probe = model.thawed();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_params(p.clone())?;
        let up = loss(&probe)?.value;
        p[i] = base[i] - h;
        probe.set_params(p)?;
        let down = loss(&probe)?.value;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Largest entry-wise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
