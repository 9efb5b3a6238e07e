use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::hac::{hac_cov, network_distances, HacSpec};
use super::network_exposure;
use crate::error::Result;
use crate::linalg::{chi2_sf, pinv_sym, Design, Ols};
use crate::types::Dataset;

/// Joint test that distance, network and interaction terms vanish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpilloverTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Tested coefficients that survived the rank check, with estimates.
    pub coefficients: Vec<(String, f64)>,
    /// Tested regressors dropped as collinear.
    pub dropped: Vec<String>,
}

impl SpilloverTest {
    pub fn rejects(&self, level: f64) -> bool {
        self.p_value < level
    }
}

/// exp(−d/20), the default distance transform.
pub fn default_transform(d: f64) -> f64 {
    (-d / 20.0).exp()
}

/// Distance from each unit to the nearest exposed unit (zero for exposed units).
pub(crate) fn distance_to_exposed(ds: &Dataset) -> Vec<f64> {
    let exposed: Vec<[f64; 2]> = ds
        .units
        .iter()
        .filter(|u| u.source > 0.0)
        .map(|u| u.x)
        .collect();
    ds.units
        .iter()
        .map(|u| {
            if u.source > 0.0 {
                return 0.0;
            }
            exposed
                .iter()
                .map(|e| ((u.x[0] - e[0]).powi(2) + (u.x[1] - e[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Wald test of β_d = β_n = β_λ = 0 in
/// Y = β₀ + β_s S + β_d f(d) + β_n Ñ + β_λ f(d)Ñ + X'γ + ε
/// with a spatial-network HAC covariance. Regressors that are collinear are
/// dropped and the test proceeds on the remaining restrictions.
pub fn spillover_test(
    ds: &Dataset,
    f: &dyn Fn(f64) -> f64,
    hac: &HacSpec,
) -> Result<SpilloverTest> {
    ds.validate()?;
    hac.validate()?;
    let n = ds.n();
    let s = ds.sources();
    let fd: Vec<f64> = distance_to_exposed(ds)
        .into_iter()
        .map(|d| if d.is_finite() { f(d) } else { 0.0 })
        .collect();
    let nt = network_exposure(&ds.network, &s);
    let mut d = Design::new(n);
    d.push("intercept", &vec![1.0; n]);
    d.push("S", &s);
    for k in 0..3 {
        d.push(
            format!("X{}", k + 1),
            &ds.units.iter().map(|u| u.controls[k]).collect::<Vec<_>>(),
        );
    }
    let tested = ["f_d", "N_tilde", "f_d_x_N_tilde"];
    d.push(tested[0], &fd);
    d.push(tested[1], &nt);
    d.push(
        tested[2],
        &fd.iter().zip(&nt).map(|(a, b)| a * b).collect::<Vec<_>>(),
    );
    let fit = Ols::fit(&d.x, &DVector::from_vec(ds.outcomes()))?;

    let hops = network_distances(&ds.network, hac.max_hops());
    let coords: Vec<[f64; 2]> = ds.units.iter().map(|u| u.x).collect();
    let scores = {
        let mut m = fit.xk.clone();
        for i in 0..n {
            m.row_mut(i).scale_mut(fit.resid[i]);
        }
        m
    };
    let cov = fit.sandwich(&hac_cov(&scores, &coords, &hops, hac));

    let first = d.names.len() - 3;
    let mut pos = Vec::new();
    let mut coefficients = Vec::new();
    let mut dropped = Vec::new();
    for (t, name) in tested.iter().enumerate() {
        match fit.kept_position(first + t) {
            Some(p) => {
                pos.push(p);
                coefficients.push((name.to_string(), fit.beta[first + t]));
            }
            None => dropped.push(name.to_string()),
        }
    }
    if pos.is_empty() {
        return Ok(SpilloverTest {
            statistic: f64::NAN,
            dof: 0,
            p_value: f64::NAN,
            coefficients,
            dropped,
        });
    }
    let q = pos.len();
    let b = DVector::from_iterator(q, pos.iter().map(|&p| fit.beta[fit.kept[p]]));
    let v = nalgebra::DMatrix::from_fn(q, q, |a, c| cov[(pos[a], pos[c])]);
    let statistic = (b.transpose() * pinv_sym(&v, 1e-12) * &b)[(0, 0)];
    Ok(SpilloverTest {
        statistic,
        dof: q,
        p_value: chi2_sf(statistic, q as f64),
        coefficients,
        dropped,
    })
}
