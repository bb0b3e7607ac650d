//! Finite-difference gradient verification utilities.
//!
//! The analytic adjoints in `tensor` are validated by comparing against
//! central differences computed in f64. These helpers are part of the public
//! API because the acceptance suite (and downstream users extending the op
//! set) need them, not just unit tests.

/// Central-difference gradient of a scalar function at `x0`.
///
/// Evaluates `f` twice per coordinate with the given `step`; f64 throughout.
pub fn numeric_gradient<F>(mut f: F, x0: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0, "step must be positive");
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative error between two gradient estimates:
/// `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps near-zero pairs from blowing up the ratio; components
/// where both magnitudes sit below the floor compare in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Maximum componentwise [`relative_error`] between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// Default comparison floor: gradients this small are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
