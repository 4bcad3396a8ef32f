//! Central finite differences for validating backward rules.

use super::array::Array;
use crate::error::Result;

/// Central-difference gradient of a scalar function of several arrays.
pub fn numeric_grad<F>(mut f: F, inputs: &[Array], h: f64) -> Result<Vec<Array>>
where
    F: FnMut(&[Array]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Array::zeros(inputs[i].shape());
        for k in 0..inputs[i].len() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let fp = f(&work)?;
            work[i].data_mut()[k] = orig - h;
            let fm = f(&work)?;
            work[i].data_mut()[k] = orig;
            g.data_mut()[k] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(analytic: &Array, numeric: &Array, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Block-normalised error: `max |a - n|` over the block divided by `max(max |n|, floor)`.
pub fn block_rel_error(analytic: &Array, numeric: &Array, floor: f64) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    diff / numeric.max_abs().max(analytic.max_abs()).max(floor)
}
