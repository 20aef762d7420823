//! Thin wrapper over tanh-sinh quadrature that refuses to hide non-finite
//! integrands or unconverged estimates.

use std::cell::Cell;

use crate::error::{Error, Result};

/// Estimates above this (relative to `max(1, |I|)`) are treated as failures.
const MAX_REL_ERROR: f64 = 1e-6;

/// `int_a^b f`, with `abs_tol` the target absolute error. `a > b` gives the
/// signed integral.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, abs_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if a > b {
        return integrate(f, b, a, abs_tol).map(|v| -v);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Quadrature { a, b });
    }
    // the backend silently maps non-finite samples to zero
    let bad = Cell::new(false);
    let out = quadrature::integrate(
        |x| {
            let y = f(x);
            if !y.is_finite() {
                bad.set(true);
            }
            y
        },
        a,
        b,
        abs_tol,
    );
    if bad.get() || !out.integral.is_finite() || out.error_estimate > MAX_REL_ERROR * out.integral.abs().max(1.0) {
        return Err(Error::Quadrature { a, b });
    }
    Ok(out.integral)
}

/// Sum of [`integrate`] over consecutive `nodes`.
pub fn integrate_split(f: impl Fn(f64) -> f64, nodes: &[f64], abs_tol: f64) -> Result<f64> {
    let mut total = 0.0;
    for w in nodes.windows(2) {
        total += integrate(&f, w[0], w[1], abs_tol)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_exponential() {
        let v = integrate(|x| 3.0 * x * x, 0.0, 2.0, 1e-13).unwrap();
        assert!((v - 8.0).abs() < 1e-12);
        let v = integrate(|x| (-x).exp(), 0.0, 30.0, 1e-14).unwrap();
        assert!((v - (1.0 - (-30.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn reversed_bounds_flip_sign() {
        let v = integrate(|x| x, 1.0, 0.0, 1e-13).unwrap();
        assert!((v + 0.5).abs() < 1e-13);
    }

    #[test]
    fn non_finite_integrand_is_an_error() {
        assert!(integrate(|x| if x > 0.5 { f64::NAN } else { 1.0 }, 0.0, 1.0, 1e-10).is_err());
    }

    #[test]
    fn split_matches_whole() {
        let f = |x: f64| x.sin();
        let whole = integrate(f, 0.0, 3.0, 1e-13).unwrap();
        let split = integrate_split(f, &[0.0, 1.0, 2.5, 3.0], 1e-13).unwrap();
        assert!((whole - split).abs() < 1e-12);
    }
}
