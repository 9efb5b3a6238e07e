use nalgebra::{DMatrix, DVector};

use super::{mean_where, Estimate, EstimateReport, EstimatorContext};
use crate::error::{Error, Result};
use crate::linalg::{pinv_sym, Ols};
use crate::types::Dataset;

/// Local regressors: intercept, exposure, score and the three controls.
const K: usize = 6;
const BANDWIDTH_GRID: [f64; 11] = [0.25, 0.35, 0.5, 0.7, 1.0, 1.4, 2.0, 3.0, 5.0, 10.0, 20.0];

struct Gps {
    s: Vec<f64>,
    y: Vec<f64>,
    /// Fitted mean X'δ of the exposure model.
    xb: Vec<f64>,
    sigma: f64,
    /// Scale of S, used to keep the local design well conditioned.
    sd_s: f64,
    /// Controls, entering the local fit linearly.
    x: Vec<[f64; 3]>,
}

impl Gps {
    fn density(&self, s: f64, i: usize) -> f64 {
        let z = (s - self.xb[i]) / self.sigma;
        (-0.5 * z * z).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn regressors(&self, ds: f64, r: f64, i: usize) -> [f64; K] {
        let x = &self.x[i];
        [1.0, ds / self.sd_s, r * self.sigma, x[0], x[1], x[2]]
    }

    /// Local regression of Y on (S − s0, R) with Gaussian kernel weights in S.
    /// Returns the linear map from Y to the coefficients, or `None` if the
    /// local design is singular.
    fn local_map(&self, s0: f64, h: f64, skip: Option<usize>) -> Option<DMatrix<f64>> {
        let n = self.s.len();
        let mut zw = DMatrix::<f64>::zeros(K, n);
        let mut ztwz = DMatrix::<f64>::zeros(K, K);
        for i in 0..n {
            if Some(i) == skip {
                continue;
            }
            let u = (self.s[i] - s0) / h;
            let w = (-0.5 * u * u).exp();
            if w < 1e-300 {
                continue;
            }
            let z = DVector::from_row_slice(&self.regressors(
                self.s[i] - s0,
                self.density(self.s[i], i),
                i,
            ));
            ztwz += &z * z.transpose() * w;
            zw.column_mut(i).copy_from(&(z * w));
        }
        let inv = pinv_sym(&ztwz, 1e-12);
        if inv.iter().all(|v| *v == 0.0) {
            return None;
        }
        Some(inv * zw)
    }

    /// Weights ω with μ(s0) = ω·Y, averaging the local fit over the
    /// population distribution of the covariates.
    fn dose_weights(&self, s0: f64, h: f64) -> Option<DVector<f64>> {
        let a = self.local_map(s0, h, None)?;
        let n = self.s.len() as f64;
        let mut m = DVector::<f64>::zeros(K);
        for i in 0..self.s.len() {
            m += DVector::from_row_slice(&self.regressors(0.0, self.density(s0, i), i));
        }
        Some(a.transpose() * (m / n))
    }

    fn loo_error(&self, h: f64) -> f64 {
        let mut sse = 0.0;
        for i in 0..self.s.len() {
            let Some(a) = self.local_map(self.s[i], h, Some(i)) else {
                return f64::INFINITY;
            };
            let z = DVector::from_row_slice(&self.regressors(0.0, self.density(self.s[i], i), i));
            let fit = (a.transpose() * &z).dot(&DVector::from_row_slice(&self.y));
            sse += (self.y[i] - fit).powi(2);
        }
        sse
    }
}

/// Generalized propensity score estimator of the dose response. The
/// exposure model is normal linear in the controls; the outcome is a kernel-weighted local regression on exposure and the
/// estimated score, with the controls entering linearly for precision. The
/// dose response averages the local fit over the observed covariates; the
/// direct effect is the average derivative of the dose
/// response over the observed positive exposures, and the total border
/// effect the dose-response contrast between the border-band exposure and
/// zero, per unit of exposure.
pub fn gps(ds: &Dataset, bandwidth: Option<f64>, ctx: &EstimatorContext) -> Result<EstimateReport> {
    ds.validate()?;
    let n = ds.n();
    let s = ds.sources();
    let exposed: Vec<usize> = (0..n).filter(|&i| s[i] > 0.0).collect();
    if exposed.is_empty() {
        return Err(Error::InsufficientData(
            "no unit has positive exposure".into(),
        ));
    }
    let (lo, hi) = exposed
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| {
            (a.min(s[i]), b.max(s[i]))
        });
    if !(hi > lo) {
        return Err(Error::InsufficientData(
            "exposure does not vary among exposed units".into(),
        ));
    }
    let y = ds.outcomes();
    let x = DMatrix::from_fn(n, 4, |i, j| {
        if j == 0 {
            1.0
        } else {
            ds.units[i].controls[j - 1]
        }
    });
    let fit = Ols::fit(&x, &DVector::from_row_slice(&s))?;
    let sigma = (fit.resid.norm_squared() / (n - fit.kept.len()) as f64).sqrt();
    let mean_s = s.iter().sum::<f64>() / n as f64;
    let sd_s = (s.iter().map(|v| (v - mean_s).powi(2)).sum::<f64>() / n as f64).sqrt();
    if !(sigma > 0.0) {
        return Err(Error::InsufficientData(
            "exposure is an exact function of the controls".into(),
        ));
    }
    let g = Gps {
        s: s.clone(),
        y,
        xb: fit.fitted.iter().copied().collect(),
        sigma,
        sd_s,
        x: ds.units.iter().map(|u| u.controls).collect(),
    };
    let mut rep = EstimateReport::new("gps", ctx);

    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => {
            return Err(Error::InvalidInput(format!(
                "bandwidth {h} must be positive"
            )))
        }
        None => {
            let mut best = (f64::INFINITY, f64::NAN);
            for m in BANDWIDTH_GRID {
                let e = g.loo_error(m * sd_s);
                if e < best.0 {
                    best = (e, m * sd_s);
                }
            }
            if !best.1.is_finite() {
                return Err(Error::Numerical("no admissible bandwidth".into()));
            }
            best.1
        }
    };
    let singular = || Error::Numerical("singular local design".into());

    // Average derivative over the observed positive exposures.
    let eps = 1e-3 * sd_s;
    let mut omega = DVector::<f64>::zeros(n);
    for &j in &exposed {
        let up = g.dose_weights(s[j] + eps, h).ok_or_else(singular)?;
        let dn = g.dose_weights(s[j] - eps, h).ok_or_else(singular)?;
        omega += (up - dn) / (2.0 * eps);
    }
    omega /= exposed.len() as f64;
    // Dose response at the border-band exposure against zero exposure.
    let band = ctx.band(ds);
    let s_band = mean_where(&s, &band);
    let contrast = if s_band > 0.0 {
        Some(
            (g.dose_weights(s_band, h).ok_or_else(singular)?
                - g.dose_weights(0.0, h).ok_or_else(singular)?)
                / s_band,
        )
    } else {
        rep.warnings
            .push("no exposed units in the border band".into());
        None
    };

    let yv = DVector::from_row_slice(&g.y);
    let mut resid = vec![0.0; n];
    for (i, r) in resid.iter_mut().enumerate() {
        let a = g.local_map(s[i], h, None).ok_or_else(singular)?;
        let z = DVector::from_row_slice(&g.regressors(0.0, g.density(s[i], i), i));
        let row = a.transpose() * z;
        // Leave-one-out residual via the smoother's leverage.
        let leverage = row[i].min(0.99);
        *r = (g.y[i] - row.dot(&yv)) / (1.0 - leverage);
    }
    let linear = |w: &DVector<f64>| {
        (
            w.dot(&yv),
            w.iter()
                .zip(&resid)
                .map(|(a, e)| (a * e).powi(2))
                .sum::<f64>()
                .sqrt(),
        )
    };
    let c = ctx.effect_scale;
    let (slope, se) = linear(&omega);
    rep.direct = Estimate::new(c * slope, c * se);
    if let Some(w) = contrast {
        let (t, tse) = linear(&w);
        rep.total_border = Estimate::new(c * t, c * tse);
    }
    rep.coefficients = vec![super::Coefficient {
        name: "average_derivative".into(),
        estimate: slope,
        se,
    }];
    rep.covariance = vec![vec![se * se]];
    rep.diagnostics.insert("bandwidth".into(), h);
    rep.diagnostics.insert("gps_sigma".into(), sigma);
    rep.diagnostics
        .insert("n_exposed".into(), exposed.len() as f64);
    Ok(rep)
}
