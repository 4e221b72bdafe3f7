//! Central-difference gradient verification.

use crate::error::{ensure, Error, Result};

/// Denominator floor for the relative error.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// Largest relative error between `analytic` and the central-difference
/// gradient of `f` at `x0`:
/// `max_i |g_analytic[i] − g_fd[i]| / max(|g_fd[i]|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, analytic: &[f64], x0: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    ensure!(
        analytic.len() == x0.len(),
        "analytic gradient has {} entries for {} coordinates",
        analytic.len(),
        x0.len()
    );
    ensure!(eps > 0.0, "eps must be positive");
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        x[i] = x0[i] + eps;
        let up = f(&x)?;
        x[i] = x0[i] - eps;
        let down = f(&x)?;
        x[i] = x0[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let fd = (up - down) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / fd.abs().max(RELATIVE_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
