use std::path::Path;

use serde::{Deserialize, Serialize};
use spnet_core::dgp::DgpSettings;
use spnet_core::estimators::{GmmOptions, HacSpec};
use spnet_core::mc::{
    check_estimator_names, EstimatorOptions, McPlan, PanelDesign, UncertaintyOptions, ESTIMATORS,
};
use spnet_core::{ConfigId, Error, Result, SpatialDomain};

/// The whole run configuration, one TOML document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dgp: DgpSettings,
    pub mc: McSection,
    pub gmm: GmmOptions,
    pub hac: HacSpec,
    pub fk: FkSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    /// Configuration used by `simulate`, `estimate` and `fk`.
    pub config: ConfigId,
    /// Dataset seed for single-dataset commands.
    pub seed: u64,
    pub configs: Vec<ConfigId>,
    pub estimators: Vec<String>,
    pub replications: usize,
    pub base_seed: u64,
    pub parallelism: usize,
    pub twfe_bins: usize,
    pub gps_bandwidth: Option<f64>,
    pub rd_bandwidth: Option<f64>,
    /// Replications of the event-study panels without and with spillovers;
    /// 0 skips a panel.
    pub event_study_replications: [usize; 2],
}

impl Default for McSection {
    fn default() -> Self {
        let plan = McPlan::default();
        Self {
            config: ConfigId::FullModel,
            seed: 1,
            configs: plan.configs,
            estimators: plan.estimators,
            replications: plan.replications,
            base_seed: plan.base_seed,
            parallelism: 0,
            twfe_bins: 20,
            gps_bandwidth: None,
            rd_bandwidth: None,
            event_study_replications: [200, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FkSection {
    /// Parameter draws and paths per draw for the decomposition and profile.
    pub draws: usize,
    pub paths: usize,
    pub horizon: f64,
    pub dt: f64,
    /// Border on the wide path domain, whose x¹ range is twice the border.
    pub border: f64,
    pub bands: Vec<[f64; 2]>,
    /// Profile distances; positive values lie on the untreated side.
    pub profile_distances: Vec<f64>,
    pub seed: u64,
}

impl Default for FkSection {
    fn default() -> Self {
        Self {
            draws: 40,
            paths: 200,
            horizon: 40.0,
            dt: 0.1,
            border: 100.0,
            bands: UncertaintyOptions::default().bands,
            profile_distances: (-5..=20).map(|k| 5.0 * k as f64).collect(),
            seed: 20240101,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidInput(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().validate()?;
        self.uncertainty().validate()?;
        let f = &self.fk;
        if f.draws < 2 || f.paths < 2 {
            return Err(Error::InvalidInput(
                "fk needs at least two draws and two paths".into(),
            ));
        }
        if let Some(d) = f.profile_distances.iter().find(|d| d.abs() > f.border) {
            return Err(Error::InvalidInput(format!(
                "profile distance {d} leaves the path domain"
            )));
        }
        check_estimator_names(&self.mc.estimators)?;
        Ok(())
    }

    pub fn estimator_options(&self) -> EstimatorOptions {
        EstimatorOptions {
            twfe_bins: self.mc.twfe_bins,
            gps_bandwidth: self.mc.gps_bandwidth,
            rd_bandwidth: self.mc.rd_bandwidth,
            hac: self.hac,
            gmm: self.gmm.clone(),
        }
    }

    pub fn plan(&self) -> McPlan {
        McPlan {
            configs: self.mc.configs.clone(),
            estimators: self.mc.estimators.clone(),
            replications: self.mc.replications,
            base_seed: self.mc.base_seed,
            dgp: self.dgp.clone(),
            estimator_options: self.estimator_options(),
            parallelism: self.mc.parallelism,
        }
    }

    pub fn uncertainty(&self) -> UncertaintyOptions {
        let f = &self.fk;
        UncertaintyOptions {
            bands: f.bands.clone(),
            draws: f.draws,
            paths: f.paths,
            horizon: f.horizon,
            dt: f.dt,
            border: f.border,
            s0: self.dgp.s0,
            domain: SpatialDomain {
                x1_range: [0.0, 2.0 * f.border],
                ..SpatialDomain::default()
            },
            seed: f.seed,
            ..UncertaintyOptions::default()
        }
    }

    pub fn panels(&self) -> [(&'static str, PanelDesign, usize); 2] {
        let [a, b] = self.mc.event_study_replications;
        [
            ("no_spillovers", PanelDesign::no_spillovers(), a),
            ("spillovers", PanelDesign::with_spillovers(), b),
        ]
    }
}

/// Splits a comma-separated estimator list, rejecting unknown names.
pub fn parse_estimators(list: &str) -> Result<Vec<String>> {
    let names: Vec<String> = list
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no estimators given; valid names are {}",
            ESTIMATORS.join(", ")
        )));
    }
    check_estimator_names(&names)?;
    Ok(names)
}
