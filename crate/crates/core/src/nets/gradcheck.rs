//! Gradient checking against central finite differences.

use super::NetsError;

/// Step size for central finite differences.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// A probe whose nearest activation kink is closer than this is rejected —
/// finite differences straddling a kink measure nothing meaningful.
pub const KINK_TOL: f64 = 1e-7;

/// A scalar loss with analytic parameter gradients, exposed in a flat
/// parameter vector so it can be probed coordinate by coordinate.
pub trait DifferentiableLoss {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]);
    /// Loss at the current parameters.
    fn loss(&self) -> Result<f64, NetsError>;
    /// Loss plus the analytic gradient at the current parameters.
    fn loss_and_grad(&self) -> Result<(f64, Vec<f64>), NetsError>;
    /// Distance from the current evaluation to the nearest
    /// non-differentiable point (ReLU kink, hinge boundary, ...).
    fn kink_margin(&self) -> Result<f64, NetsError>;
}

/// Compares the analytic gradient of `f` to central finite differences at
/// the current parameters and returns the maximum relative error over all
/// parameters.
///
/// Fails with [`NetsError::NonDifferentiablePoint`] when the probe sits
/// within [`KINK_TOL`] of an activation kink, because the two-sided
/// difference would straddle the kink and disagree with either one-sided
/// derivative.
pub fn grad_check(f: &mut dyn DifferentiableLoss) -> Result<f64, NetsError> {
    let margin = f.kink_margin()?;
    if margin < KINK_TOL {
        return Err(NetsError::NonDifferentiablePoint {
            margin,
            tol: KINK_TOL,
        });
    }

    let (_, analytic) = f.loss_and_grad()?;
    let p0 = f.params();
    if analytic.len() != p0.len() {
        return Err(NetsError::DimensionMismatch(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            p0.len()
        )));
    }

    let mut max_rel = 0.0f64;
    let mut probe = p0.clone();
    for i in 0..p0.len() {
        probe[i] = p0[i] + GRAD_CHECK_STEP;
        f.set_params(&probe);
        let loss_plus = f.loss()?;
        probe[i] = p0[i] - GRAD_CHECK_STEP;
        f.set_params(&probe);
        let loss_minus = f.loss()?;
        probe[i] = p0[i];

        let numeric = (loss_plus - loss_minus) / (2.0 * GRAD_CHECK_STEP);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    f.set_params(&p0);
    Ok(max_rel)
}
