use super::NumError;

/// Central-difference step used by every gradient check in the crate.
pub const FD_STEP: f64 = 1e-5;

/// Relative error used by [`grad_check`]:
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central finite difference of `f` along coordinate `i` at `point`.
pub fn numeric_partial(f: &mut impl FnMut(&[f64]) -> f64, point: &[f64], i: usize) -> Result<f64, NumError> {
    let mut x = point.to_vec();
    x[i] = point[i] + FD_STEP;
    let up = f(&x);
    x[i] = point[i] - FD_STEP;
    let down = f(&x);
    if !up.is_finite() || !down.is_finite() {
        return Err(NumError::NonFinite { name: format!("objective near coordinate {i}") });
    }
    Ok((up - down) / (2.0 * FD_STEP))
}

/// Compares `analytic` against central differences of `f` at every
/// coordinate and returns the largest relative error.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> f64, analytic: &[f64], point: &[f64]) -> Result<f64, NumError> {
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(&mut f, analytic, point, &coords)
}

/// [`grad_check`] restricted to a subset of coordinates, for models whose
/// full parameter vector is too large to sweep.
pub fn grad_check_coords(
    mut f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    coords: &[usize],
) -> Result<f64, NumError> {
    if analytic.len() != point.len() {
        return Err(NumError::Shape { op: "grad_check", left: (analytic.len(), 1), right: (point.len(), 1) });
    }
    if !f(point).is_finite() {
        return Err(NumError::NonFinite { name: "objective at point".into() });
    }
    let mut worst = 0.0f64;
    for &i in coords {
        let numeric = numeric_partial(&mut f, point, i)?;
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
