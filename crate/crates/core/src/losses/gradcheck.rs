use crate::error::{Error, Result};

/// Central differences `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, params: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let hi = f(&p);
        p[i] = orig - eps;
        let lo = f(&p);
        p[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// Largest `|a - n| / max(|a|, |n|, 1e-6)` over all coordinates. The floor sits
/// well above central-difference roundoff (about `ulp(f) / eps`), so exact
/// zeros are not compared against noise.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Compares an analytic gradient against central differences of `f`.
pub fn grad_check(
    f: impl Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64> {
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Invalid("non-finite parameter".into()));
    }
    let numeric = numeric_gradient(f, params, eps)?;
    Ok(max_relative_error(analytic, &numeric))
}

/// Largest finite-difference magnitude of `f`; used on paths whose gradient
/// is declared to be zero.
pub fn max_numeric_magnitude(f: impl Fn(&[f64]) -> f64, params: &[f64], eps: f64) -> Result<f64> {
    Ok(numeric_gradient(f, params, eps)?
        .iter()
        .fold(0.0, |m, g| m.max(g.abs())))
}
