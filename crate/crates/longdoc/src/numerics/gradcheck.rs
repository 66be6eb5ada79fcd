//! Central-difference gradient checker used to validate every backward pass.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Compare analytic gradients against central differences.
///
/// `f` evaluates the scalar loss at the given parameter values; `analytic`
/// holds one gradient tensor per parameter, shape-matched. Returns the
/// maximum over all parameter entries of
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
///
/// Run this on an `f64` instance of the model (see `Tensor::cast`); in f32
/// the difference quotient drowns in rounding noise at useful step sizes.
pub fn finite_diff_check<R: Real>(
    f: &mut dyn FnMut(&[Tensor<R>]) -> Result<f64>,
    params: &[Tensor<R>],
    analytic: &[Tensor<R>],
    h: f64,
) -> Result<f64> {
    assert!(h > 0.0, "step must be positive");
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut work: Vec<Tensor<R>> = params.to_vec();
    let mut max_err = 0.0f64;
    for p in 0..params.len() {
        assert_eq!(params[p].shape(), analytic[p].shape(), "gradient shape mismatch");
        for idx in 0..params[p].numel() {
            let orig = params[p].data()[idx];
            work[p].data_mut()[idx] = R::of(orig.f64() + h);
            let plus = f(&work)?;
            work[p].data_mut()[idx] = R::of(orig.f64() - h);
            let minus = f(&work)?;
            work[p].data_mut()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("finite_diff_check loss".into()));
            }
            let central = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[idx].f64();
            let err = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
