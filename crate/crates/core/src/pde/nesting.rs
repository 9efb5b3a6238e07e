//! Closed-form quantities and discrete-model nestings of the master equation.

use crate::error::{Error, Result};
use crate::types::StructuralParams;

/// Long-run amplification 1 + (ν_s+ν_n)/κ + λ²/(κ(ν_s+ν_n)); 1 without diffusion.
pub fn amplification_factor(p: &StructuralParams) -> f64 {
    let nu = p.nu_s + p.nu_n;
    if nu == 0.0 {
        return 1.0;
    }
    1.0 + nu / p.kappa + p.lambda * p.lambda / (p.kappa * nu)
}

/// Euler step of dτ/dt = −κτ + S: persistence ρ = 1 − κΔt and loading β = Δt.
pub fn ar1_from_structural(kappa: f64, dt: f64) -> Result<(f64, f64)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!(
            "dt must be positive, got {dt}"
        )));
    }
    Ok((1.0 - kappa * dt, dt))
}

pub fn structural_from_ar1(rho: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!(
            "dt must be positive, got {dt}"
        )));
    }
    if !(rho < 1.0) {
        return Err(Error::InvalidInput(format!(
            "rho = {rho} has no positive decay rate"
        )));
    }
    Ok((1.0 - rho) / dt)
}

pub fn half_life(kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidInput(format!(
            "half-life needs kappa > 0, got {kappa}"
        )));
    }
    Ok(std::f64::consts::LN_2 / kappa)
}

/// Error-correction form: speed κΔt, long-run multiplier 1/κ, impact Δt.
pub fn ecm_from_structural(kappa: f64, dt: f64) -> Result<(f64, f64, f64)> {
    if !(kappa > 0.0 && dt > 0.0) {
        return Err(Error::InvalidInput(format!(
            "need kappa, dt > 0, got {kappa}, {dt}"
        )));
    }
    Ok((kappa * dt, 1.0 / kappa, dt))
}

/// Spatial-lag coefficient of the steady state on a regular lattice.
pub fn sar_from_structural(nu_s: f64, kappa: f64, dx: f64, n_neighbors: f64) -> Result<f64> {
    if !(nu_s >= 0.0 && kappa > 0.0 && dx > 0.0 && n_neighbors > 0.0) {
        return Err(Error::InvalidInput(
            "SAR mapping needs nu_s >= 0 and positive kappa, dx, n".into(),
        ));
    }
    Ok(nu_s * n_neighbors / (kappa * dx * dx))
}

pub fn structural_from_sar(rho: f64, kappa: f64, dx: f64, n_neighbors: f64) -> Result<f64> {
    if !(rho >= 0.0 && kappa > 0.0 && dx > 0.0 && n_neighbors > 0.0) {
        return Err(Error::InvalidInput(
            "SAR inversion needs rho >= 0 and positive kappa, dx, n".into(),
        ));
    }
    Ok(rho * kappa * dx * dx / n_neighbors)
}

/// Direct coefficient 1/κ and neighbour coefficient ν_n/κ.
pub fn network_te_coefficients(nu_n: f64, kappa: f64) -> Result<(f64, f64)> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidInput(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    Ok((1.0 / kappa, nu_n / kappa))
}

/// Event-time coefficients for k = −K..=L: zero before treatment and
/// β₀(1−κΔt)^k from k = 0 on.
pub fn predicted_event_study(
    beta0: f64,
    kappa: f64,
    dt: f64,
    pre: usize,
    post: usize,
) -> Result<Vec<f64>> {
    let kd = kappa * dt;
    if !(kd > 0.0 && kd < 1.0) {
        return Err(Error::InvalidInput(format!(
            "kappa·dt = {kd} outside (0, 1)"
        )));
    }
    let mut out = vec![0.0; pre];
    out.extend((0..=post).map(|k| beta0 * (1.0 - kd).powi(k as i32)));
    Ok(out)
}

/// Diffusivity implied by a stationary variance: D = σ²/(2κ).
pub fn diffusion_from_volatility(sigma_sq: f64, kappa: f64) -> Result<f64> {
    if !(sigma_sq >= 0.0 && kappa > 0.0) {
        return Err(Error::InvalidInput("need sigma² >= 0 and kappa > 0".into()));
    }
    Ok(sigma_sq / (2.0 * kappa))
}
