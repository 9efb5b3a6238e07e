//! Reduced-form and structural estimators of spillover effects.
//!
//! Every estimator returns an [`EstimateReport`] on the same scale: effects
//! are expressed per unit of source intensity and multiplied by the
//! context's `effect_scale`, so that the no-spillover truth is
//! `effect_scale / kappa` for every configuration.

mod did;
mod event_study;
mod gmm;
mod gps;
mod hac;
mod iv;
mod mi;
mod rd;
mod spillover;
mod twfe;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dgp::DgpSettings;
use crate::types::{Dataset, StructuralParams};

pub use did::did;
pub use event_study::{event_study_decay_test, DecayTest};
pub use gmm::{full_gmm, GmmOptions, GmmProblem, MomentBreakdown};
pub use gps::gps;
pub use hac::{hac_cov, network_distances, HacSpec};
pub use iv::network_iv;
pub use mi::{ksg_terms, mutual_information};
pub use rd::{ik_bandwidth, local_linear_discontinuity, spatial_rd};
pub use spillover::{default_transform, spillover_test, SpilloverTest};
pub use twfe::twfe;

/// Two-sided 95% normal critical value used for every reported interval.
pub const Z95: f64 = 1.96;

/// A point estimate with its standard error and 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

impl Estimate {
    pub fn new(estimate: f64, se: f64) -> Self {
        let se = if se.is_finite() {
            se.max(0.0)
        } else {
            f64::NAN
        };
        Self {
            estimate,
            se,
            ci_lower: estimate - Z95 * se,
            ci_upper: estimate + Z95 * se,
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lower <= truth && truth <= self.ci_upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStatistic {
    pub name: String,
    pub statistic: f64,
    pub dof: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralEstimate {
    pub params: StructuralParams,
    pub se: [f64; 4],
    pub cov: [[f64; 4]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub direct: Estimate,
    pub total_border: Estimate,
    pub structural: Option<StructuralEstimate>,
    pub coefficients: Vec<Coefficient>,
    /// Covariance of `coefficients`, row major.
    pub covariance: Vec<Vec<f64>>,
    pub tests: Vec<TestStatistic>,
    pub diagnostics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    pub effect_scale: f64,
}

impl EstimateReport {
    pub(crate) fn new(estimator: &str, ctx: &EstimatorContext) -> Self {
        Self {
            estimator: estimator.to_string(),
            direct: Estimate::new(f64::NAN, f64::NAN),
            total_border: Estimate::new(f64::NAN, f64::NAN),
            structural: None,
            coefficients: Vec::new(),
            covariance: Vec::new(),
            tests: Vec::new(),
            diagnostics: BTreeMap::new(),
            warnings: Vec::new(),
            effect_scale: ctx.effect_scale,
        }
    }

    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn test(&self, name: &str) -> Option<&TestStatistic> {
        self.tests.iter().find(|t| t.name == name)
    }

    pub(crate) fn set_coefficients(
        &mut self,
        names: &[String],
        beta: &[f64],
        cov: &nalgebra::DMatrix<f64>,
    ) {
        self.coefficients = names
            .iter()
            .zip(beta)
            .enumerate()
            .map(|(i, (n, &b))| Coefficient {
                name: n.clone(),
                estimate: b,
                se: cov[(i, i)].max(0.0).sqrt(),
            })
            .collect();
        self.covariance = (0..cov.nrows())
            .map(|i| cov.row(i).iter().copied().collect())
            .collect();
    }
}

/// Quantities every estimator needs besides the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorContext {
    /// Multiplier converting per-intensity responses into reported effects.
    pub effect_scale: f64,
    /// Location of the treatment border on x¹.
    pub border: f64,
    /// Half-width of the band that defines the total border effect.
    pub border_band: f64,
    /// Range of x², used for the region bins.
    pub x2_range: [f64; 2],
}

impl Default for EstimatorContext {
    fn default() -> Self {
        Self {
            effect_scale: 0.025,
            border: 50.0,
            border_band: 5.0,
            x2_range: [0.0, 100.0],
        }
    }
}

impl EstimatorContext {
    pub fn from_settings(s: &DgpSettings) -> Self {
        Self {
            effect_scale: s.effect_scale,
            border: s.border,
            border_band: s.border_band,
            x2_range: s.domain().x2_range,
        }
    }

    pub(crate) fn treated(&self, ds: &Dataset) -> Vec<bool> {
        ds.units.iter().map(|u| u.x[0] > self.border).collect()
    }

    /// Treated units within the border band.
    pub(crate) fn band(&self, ds: &Dataset) -> Vec<bool> {
        ds.units
            .iter()
            .map(|u| u.x[0] > self.border && u.x[0] - self.border <= self.border_band)
            .collect()
    }
}

/// Exposure through the network: Σ_j G_ij S_j.
pub(crate) fn network_exposure(adj: &crate::types::Adjacency, s: &[f64]) -> Vec<f64> {
    adj.spmv(s)
}

pub(crate) fn mean_where(v: &[f64], mask: &[bool]) -> f64 {
    let (s, n) = v
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
    s / n as f64
}
