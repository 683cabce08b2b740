//! Central finite-difference gradient oracle.
//!
//! These helpers only ever call a loss function forward, so they stay
//! independent of the tape's backward rules they are used to check.

/// d f / d x[i] ≈ (f(x + h·e_i) − f(x − h·e_i)) / 2h for every coordinate.
pub fn central_diff<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Absolute differences below this are indistinguishable from the roundoff
/// noise of a central difference at step 1e-6 on losses of order one to a
/// few tens (eps·|f|/h ≈ 2e-10·|f|).
pub const FD_NOISE_FLOOR: f64 = 1e-8;

/// Componentwise relative error, with differences under the finite
/// difference noise floor counting as exact agreement.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= FD_NOISE_FLOOR {
        return 0.0;
    }
    diff / (a.abs() + b.abs()).max(FD_NOISE_FLOOR)
}

/// Largest componentwise relative error between two gradients.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}
