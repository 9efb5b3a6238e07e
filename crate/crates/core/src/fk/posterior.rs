use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fk_path_values, PathSpec, Source};
use crate::error::{Error, Result};
use crate::seed::SeedSpec;
use crate::types::StructuralParams;

/// ∇'V∇ for a symmetric positive semidefinite V.
pub fn delta_method_variance(gradient: &[f64; 4], v: &[[f64; 4]; 4]) -> Result<f64> {
    for i in 0..4 {
        for j in 0..i {
            if (v[i][j] - v[j][i]).abs() > 1e-8 {
                return Err(Error::InvalidInput(format!(
                    "covariance asymmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut q = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            q += gradient[i] * v[i][j] * gradient[j];
        }
    }
    Ok(q)
}

/// Gaussian approximation N(mean, cov) to the posterior of (ν_s, ν_n, κ, λ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: [f64; 4],
    pub cov: [[f64; 4]; 4],
}

impl GaussianPosterior {
    pub fn degenerate(p: StructuralParams) -> Self {
        Self {
            mean: p.as_array(),
            cov: [[0.0; 4]; 4],
        }
    }

    /// Symmetric square root with negative eigenvalues clipped to zero.
    fn root(&self) -> Matrix4<f64> {
        let c = Matrix4::from_fn(|i, j| 0.5 * (self.cov[i][j] + self.cov[j][i]));
        let eig = SymmetricEigen::new(c);
        let d = Matrix4::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        eig.eigenvectors * d * eig.eigenvectors.transpose()
    }
}

/// One accepted parameter draw and its path statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub params: StructuralParams,
    pub mean: f64,
    /// Across-path sample variance.
    pub path_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub total_variance: f64,
    pub within_model_variance: f64,
    pub parameter_variance: f64,
    pub interval: (f64, f64),
    pub level: f64,
    pub rejected: usize,
    pub paths_per_draw: usize,
    pub draws: Vec<PosteriorDraw>,
}

impl PosteriorSummary {
    pub fn parameter_share(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.parameter_variance / self.total_variance
        } else {
            0.0
        }
    }
}

/// Type-7 empirical quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Draws `b` admissible parameter vectors, redrawing inadmissible ones.
pub fn draw_parameters(
    posterior: &GaussianPosterior,
    b: usize,
    seed: SeedSpec,
) -> Result<(Vec<StructuralParams>, usize)> {
    let root = posterior.root();
    let mean = Vector4::from_column_slice(&posterior.mean);
    let mut rng = seed.rng("theta", 0);
    let mut out = Vec::with_capacity(b);
    let mut rejected = 0;
    while out.len() < b {
        let z = Vector4::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let th = mean + root * z;
        let p = StructuralParams::new(th[0], th[1], th[2], th[3]);
        if p.is_valid() {
            out.push(p);
        } else {
            rejected += 1;
            if rejected > b.max(1) {
                return Err(Error::Numerical(format!(
                    "more than half of posterior draws rejected ({rejected} rejected, {} accepted)",
                    out.len()
                )));
            }
        }
    }
    Ok((out, rejected))
}

/// Path-integral Monte Carlo over a Gaussian parameter posterior: `b` draws,
/// `spec.m` paths per draw, credible interval at level 1 − `a`.
pub fn pimc(
    posterior: &GaussianPosterior,
    b: usize,
    source: &dyn Source,
    spec: &PathSpec,
    seed: SeedSpec,
    a: f64,
) -> Result<PosteriorSummary> {
    if b < 2 || spec.n_paths() < 2 {
        return Err(Error::InvalidInput(
            "pimc needs at least two draws and two paths".into(),
        ));
    }
    let (params, rejected) = draw_parameters(posterior, b, seed)?;
    let draws = params
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let v = fk_path_values(p, source, None, spec, seed.child("draw", k as u64))?;
            let s = super::summarize_values(&v, false);
            Ok(PosteriorDraw {
                params: *p,
                mean: s.estimate,
                path_variance: s.path_variance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_draws(draws, rejected, spec.n_paths(), a))
}

/// Variance decomposition and credible interval from per-draw statistics.
pub fn summarize_draws(
    draws: Vec<PosteriorDraw>,
    rejected: usize,
    paths: usize,
    a: f64,
) -> PosteriorSummary {
    let b = draws.len() as f64;
    let means: Vec<f64> = draws.iter().map(|d| d.mean).collect();
    let (mean, parameter_variance) = super::mean_var(&means);
    let within_model_variance =
        draws.iter().map(|d| d.path_variance).sum::<f64>() / b / paths as f64;
    let mut sorted: Vec<f64> = draws.iter().map(|d| d.mean).collect();
    sorted.sort_by(f64::total_cmp);
    let interval = (
        quantile_sorted(&sorted, a / 2.0),
        quantile_sorted(&sorted, 1.0 - a / 2.0),
    );
    PosteriorSummary {
        mean,
        total_variance: within_model_variance + parameter_variance,
        within_model_variance,
        parameter_variance,
        interval,
        level: 1.0 - a,
        rejected,
        paths_per_draw: paths,
        draws,
    }
}

/// Posterior mean with 68% and 95% bands at one distance from the border.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub distance: f64,
    pub mean: f64,
    pub lo68: f64,
    pub hi68: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Where the profile is taken: points at x¹ = border − distance, so positive
/// distances lie on the untreated side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileLine {
    pub border: f64,
    pub x2: f64,
    pub alpha: f64,
}

/// Every distance reuses the same parameter draws and path stream, so the
/// profile is smooth in distance rather than carrying independent noise at
/// each point.
pub fn distance_profile(
    posterior: &GaussianPosterior,
    b: usize,
    source: &dyn Source,
    line: &ProfileLine,
    distances: &[f64],
    spec: &PathSpec,
    seed: SeedSpec,
) -> Result<Vec<ProfileRow>> {
    distances
        .iter()
        .map(|&d| {
            let mut s = *spec;
            s.start = [line.border - d, line.x2, line.alpha];
            let summ = pimc(posterior, b, source, &s, seed, 0.05)?;
            let mut sorted: Vec<f64> = summ.draws.iter().map(|d| d.mean).collect();
            sorted.sort_by(f64::total_cmp);
            Ok(ProfileRow {
                distance: d,
                mean: summ.mean,
                lo68: quantile_sorted(&sorted, 0.16),
                hi68: quantile_sorted(&sorted, 0.84),
                lo95: summ.interval.0,
                hi95: summ.interval.1,
            })
        })
        .collect()
}
