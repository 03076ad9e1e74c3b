//! Central finite-difference gradient checking.
//!
//! Used by the test suites to validate every backward implementation against
//! an independent numerical derivative. Kept in the library (not test code)
//! so integration tests of downstream crates can reuse it.

use super::Arr;

/// Central finite-difference gradient of `f` at `x`.
///
/// `f` is re-evaluated 2·len(x) times with one element perturbed by ±eps.
pub fn numeric_grad(mut f: impl FnMut(&Arr) -> f32, x: &Arr, eps: f32) -> Arr {
    let mut grad = Arr::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + eps;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - eps;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Maximum relative error between an analytic and a numeric gradient.
///
/// Per-element error is `|a - n| / max(|a|, |n|, floor)`; `floor` guards
/// against near-zero denominators.
pub fn max_relative_error(analytic: &Arr, numeric: &Arr, floor: f32) -> f32 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f32::max)
}
