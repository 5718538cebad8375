//! Finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares an analytic gradient against central finite differences of a
/// scalar-valued function.
///
/// For every coordinate `i` of `input`, evaluates
/// `numeric_i = (loss(x + step*e_i) - loss(x - step*e_i)) / (2*step)` and
/// returns the maximum over coordinates of
/// `|analytic_i - numeric_i| / max(1, |analytic_i|)`.
///
/// The difference quotient is formed in f64 so the check measures the
/// backward pass, not the subtraction.
pub fn grad_check(
    mut loss: impl FnMut(&Tensor) -> Result<f32>,
    analytic: &Tensor,
    input: &Tensor,
    step: f32,
) -> Result<f32> {
    if analytic.shape() != input.shape() {
        return Err(Error::shape(
            "grad_check",
            format!("analytic gradient of shape {:?}", input.shape()),
            format!("{:?}", analytic.shape()),
        ));
    }
    analytic.ensure_finite("grad_check analytic gradient")?;

    let mut probe = input.clone();
    let mut max_err = 0.0f32;
    for i in 0..input.len() {
        let original = input.data()[i];

        probe.data_mut()[i] = original + step;
        let plus = loss(&probe)?;
        probe.data_mut()[i] = original - step;
        let minus = loss(&probe)?;
        probe.data_mut()[i] = original;

        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check loss at coordinate {}",
                i
            )));
        }
        let numeric = (plus as f64 - minus as f64) / (2.0 * step as f64);
        let a = analytic.data()[i] as f64;
        let err = (a - numeric).abs() / a.abs().max(1.0);
        max_err = max_err.max(err as f32);
    }
    Ok(max_err)
}
