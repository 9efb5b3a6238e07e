use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::EstimateReport;
use crate::fk::{
    draw_parameters, fk_path_values, summarize_draws, GaussianPosterior, PathSpec, PosteriorDraw,
};
use crate::seed::SeedSpec;
use crate::types::SpatialDomain;

/// Path-integral settings for the distance-banded decomposition. Distances
/// are measured from the border into the treated region, on a domain wide
/// enough that the far boundary does not matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyOptions {
    pub bands: Vec<[f64; 2]>,
    pub draws: usize,
    pub paths: usize,
    pub horizon: f64,
    pub dt: f64,
    pub border: f64,
    pub x2: f64,
    pub alpha: f64,
    pub s0: f64,
    pub intensity_slope: f64,
    pub domain: SpatialDomain,
    pub seed: u64,
}

impl Default for UncertaintyOptions {
    fn default() -> Self {
        Self {
            bands: vec![[0.0, 25.0], [25.0, 50.0], [50.0, 75.0], [75.0, 100.0]],
            draws: 50,
            paths: 200,
            horizon: 40.0,
            dt: 0.1,
            border: 100.0,
            x2: 50.0,
            alpha: 0.5,
            s0: 0.1,
            intensity_slope: 0.3,
            domain: SpatialDomain {
                x1_range: [0.0, 200.0],
                ..SpatialDomain::default()
            },
            seed: 20240101,
        }
    }
}

impl UncertaintyOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.bands.is_empty() || self.bands.iter().any(|b| !(b[1] > b[0] && b[0] >= 0.0)) {
            return bad(format!(
                "bands {:?} must be non-empty increasing intervals",
                self.bands
            ));
        }
        if self.draws < 2 || self.paths < 2 {
            return bad("need at least two draws and two paths".into());
        }
        if !(self.horizon > 0.0 && self.dt > 0.0 && self.dt <= self.horizon) {
            return bad("need 0 < dt <= horizon".into());
        }
        self.domain.validate()?;
        let far = self.border + self.bands.iter().map(|b| b[1]).fold(0.0, f64::max);
        if !(self.border > self.domain.x1_range[0] && far <= self.domain.x1_range[1]) {
            return bad(format!("bands reach x1 = {far}, outside the domain"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub band_lower: f64,
    pub band_upper: f64,
    /// Evaluation point: the band midpoint.
    pub distance: f64,
    pub mean: f64,
    pub total_variance: f64,
    pub within_model_variance: f64,
    pub parameter_variance: f64,
    pub within_model_pct: f64,
    pub parameter_pct: f64,
}

/// Splits the variance of the effect at each band midpoint into path noise
/// and parameter uncertainty, drawing parameters from the normal
/// approximation to a structural fit. Every draw reuses the same path
/// stream, so parameter variance is exactly zero for a degenerate posterior.
pub fn uncertainty_table(
    report: &EstimateReport,
    opts: &UncertaintyOptions,
) -> Result<Vec<UncertaintyRow>> {
    opts.validate()?;
    let st = report.structural.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!(
            "report '{}' has no structural estimate",
            report.estimator
        ))
    })?;
    let posterior = GaussianPosterior {
        mean: st.params.as_array(),
        cov: st.cov,
    };
    let seed = SeedSpec::new(opts.seed);
    let (params, rejected) = draw_parameters(&posterior, opts.draws, seed.child("parameters", 0))?;
    let (border, s0, sl) = (opts.border, opts.s0, opts.intensity_slope);
    let source = move |p: [f64; 3], _t: f64| {
        if p[0] > border {
            s0 * (1.0 + sl * p[2])
        } else {
            0.0
        }
    };
    let paths = seed.child("paths", 0);
    opts.bands
        .iter()
        .map(|b| {
            let d = 0.5 * (b[0] + b[1]);
            let spec = PathSpec::new(
                [border + d, opts.x2, opts.alpha],
                opts.horizon,
                opts.dt,
                opts.paths,
                opts.domain,
            );
            let draws = params
                .par_iter()
                .map(|p| {
                    let v = fk_path_values(p, &source, None, &spec, paths)?;
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
                    Ok(PosteriorDraw {
                        params: *p,
                        mean: m,
                        path_variance: var,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let s = summarize_draws(draws, rejected, spec.n_paths(), 0.05);
            let pct = |v: f64| {
                if s.total_variance > 0.0 {
                    100.0 * v / s.total_variance
                } else {
                    0.0
                }
            };
            Ok(UncertaintyRow {
                band_lower: b[0],
                band_upper: b[1],
                distance: d,
                mean: s.mean,
                total_variance: s.total_variance,
                within_model_variance: s.within_model_variance,
                parameter_variance: s.parameter_variance,
                within_model_pct: pct(s.within_model_variance),
                parameter_pct: pct(s.parameter_variance),
            })
        })
        .collect()
}

pub fn write_uncertainty(path: &std::path::Path, rows: &[UncertaintyRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "band_lower",
        "band_upper",
        "distance",
        "mean",
        "total_variance",
        "within_model_variance",
        "parameter_variance",
        "within_model_pct",
        "parameter_pct",
    ])?;
    for r in rows {
        w.write_record(
            [
                r.band_lower,
                r.band_upper,
                r.distance,
                r.mean,
                r.total_variance,
                r.within_model_variance,
                r.parameter_variance,
                r.within_model_pct,
                r.parameter_pct,
            ]
            .map(|v| format!("{v:.16e}")),
        )?;
    }
    w.flush()?;
    Ok(())
}
