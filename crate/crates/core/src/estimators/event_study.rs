use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::chi2_sf;

/// Outcome of the exponential-decay check on post-treatment coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayTest {
    /// False when the coefficients change sign; the other fields are NaN then.
    pub applicable: bool,
    /// Continuous-time rate −slope/Δt.
    pub kappa_hat: f64,
    pub kappa_se: f64,
    /// Discrete rate (1 − e^{slope})/Δt, matching coefficients β₀(1 − κΔt)^k.
    pub kappa_discrete: f64,
    /// Weighted sum of squared residuals of the log-linear fit.
    pub statistic: f64,
    pub dof: usize,
    pub joint_p: f64,
}

/// Weighted regression of log|β_k| on k, k = 0, 1, ..., with weights
/// (β_k/se_k)² from the delta method.
pub fn event_study_decay_test(coeffs: &[(f64, f64)], dt: f64) -> Result<DecayTest> {
    if coeffs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} coefficients, need 3",
            coeffs.len()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt = {dt} must be positive")));
    }
    if coeffs
        .iter()
        .any(|&(b, se)| !(b != 0.0 && b.is_finite() && se > 0.0))
    {
        return Err(Error::InvalidInput(
            "coefficients must be nonzero with positive standard errors".into(),
        ));
    }
    let sign = coeffs[0].0.signum();
    if coeffs.iter().any(|&(b, _)| b.signum() != sign) {
        return Ok(DecayTest {
            applicable: false,
            kappa_hat: f64::NAN,
            kappa_se: f64::NAN,
            kappa_discrete: f64::NAN,
            statistic: f64::NAN,
            dof: 0,
            joint_p: f64::NAN,
        });
    }
    let y: Vec<f64> = coeffs.iter().map(|&(b, _)| b.abs().ln()).collect();
    let w: Vec<f64> = coeffs.iter().map(|&(b, se)| (b / se).powi(2)).collect();
    let sw: f64 = w.iter().sum();
    let kbar = w
        .iter()
        .enumerate()
        .map(|(k, wk)| wk * k as f64)
        .sum::<f64>()
        / sw;
    let ybar = w.iter().zip(&y).map(|(wk, yk)| wk * yk).sum::<f64>() / sw;
    let sxx: f64 = w
        .iter()
        .enumerate()
        .map(|(k, wk)| wk * (k as f64 - kbar).powi(2))
        .sum();
    let sxy: f64 = w
        .iter()
        .enumerate()
        .map(|(k, wk)| wk * (k as f64 - kbar) * (y[k] - ybar))
        .sum();
    let slope = sxy / sxx;
    let statistic: f64 = w
        .iter()
        .enumerate()
        .map(|(k, wk)| wk * (y[k] - ybar - slope * (k as f64 - kbar)).powi(2))
        .sum();
    let dof = coeffs.len() - 2;
    Ok(DecayTest {
        applicable: true,
        kappa_hat: -slope / dt,
        kappa_se: (1.0 / sxx).sqrt() / dt,
        kappa_discrete: (1.0 - slope.exp()) / dt,
        statistic,
        dof,
        joint_p: chi2_sf(statistic, dof as f64),
    })
}
