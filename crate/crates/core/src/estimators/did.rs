use nalgebra::{DMatrix, DVector};

use super::{Estimate, EstimateReport, EstimatorContext};
use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use crate::types::Dataset;

const TRIM: [f64; 2] = [0.01, 0.99];

/// Logistic regression by Newton–Raphson. Returns fitted probabilities.
pub(crate) fn logit(x: &DMatrix<f64>, d: &[bool]) -> Result<Vec<f64>> {
    let (n, k) = x.shape();
    let mut b = DVector::<f64>::zeros(k);
    for _ in 0..100 {
        let eta = x * &b;
        let p: Vec<f64> = eta.iter().map(|&e| 1.0 / (1.0 + (-e).exp())).collect();
        let mut grad = DVector::<f64>::zeros(k);
        let mut hess = DMatrix::<f64>::zeros(k, k);
        for i in 0..n {
            let xi = x.row(i).transpose();
            let r = f64::from(u8::from(d[i])) - p[i];
            grad += &xi * r;
            hess += &xi * xi.transpose() * (p[i] * (1.0 - p[i]));
        }
        let step = spd_inverse(&hess).map_err(|_| {
            Error::Numerical("propensity model is degenerate (perfect separation)".into())
        })? * grad;
        b += &step;
        if b.amax() > 50.0 {
            return Err(Error::Numerical(
                "propensity model is degenerate (perfect separation)".into(),
            ));
        }
        if step.amax() < 1e-10 {
            return Ok((x * &b).iter().map(|&e| 1.0 / (1.0 + (-e).exp())).collect());
        }
    }
    Err(Error::NonConvergence {
        iterations: 100,
        residual: f64::NAN,
    })
}

struct IpwFit {
    att: f64,
    att_se: f64,
    /// ATT divided by the mean exposure of the treated rows.
    per_exposure: f64,
    per_exposure_se: f64,
    trimmed: usize,
    range: [f64; 2],
}

/// IPW ATT of the treated side on `rows`, with the propensity fitted on
/// those rows. Outcomes are centred on the first row so that constant
/// outcomes give exactly zero. Standard errors come from the joint sandwich
/// of the logit scores, the two weighted means and the treated exposure
/// mean, so they account for the estimated propensity and for the ratio.
fn ipw_att(ds: &Dataset, rows: &[usize], d: &[bool]) -> Result<IpwFit> {
    let n = rows.len();
    let n1 = rows.iter().filter(|&&i| d[i]).count();
    if n1 == 0 || n1 == n {
        return Err(Error::InsufficientData(
            "both treated and control units are required".into(),
        ));
    }
    let x = DMatrix::from_fn(n, 4, |r, j| {
        if j == 0 {
            1.0
        } else {
            ds.units[rows[r]].controls[j - 1]
        }
    });
    let dd: Vec<bool> = rows.iter().map(|&i| d[i]).collect();
    let raw = logit(&x, &dd)?;
    let clamped: Vec<bool> = raw.iter().map(|&p| p < TRIM[0] || p > TRIM[1]).collect();
    let trimmed = clamped.iter().filter(|&&c| c).count();
    let p: Vec<f64> = raw.iter().map(|v| v.clamp(TRIM[0], TRIM[1])).collect();
    let y0 = ds.units[rows[0]].outcome;
    let y: Vec<f64> = rows.iter().map(|&i| ds.units[i].outcome - y0).collect();
    let s: Vec<f64> = rows.iter().map(|&i| ds.units[i].source).collect();
    let w: Vec<f64> = (0..n)
        .map(|r| if dd[r] { 0.0 } else { p[r] / (1.0 - p[r]) })
        .collect();
    let wsum: f64 = w.iter().sum();
    let nm = n1 as f64;
    let mu1 = (0..n).filter(|&r| dd[r]).map(|r| y[r]).sum::<f64>() / nm;
    let mu0 = (0..n).map(|r| w[r] * y[r]).sum::<f64>() / wsum;
    let s1 = (0..n).filter(|&r| dd[r]).map(|r| s[r]).sum::<f64>() / nm;

    // θ = (logit coefficients, μ1, μ0, s̄1).
    let k = 7;
    let nf = n as f64;
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut b = DMatrix::<f64>::zeros(k, k);
    let mut psi = DVector::<f64>::zeros(k);
    for r in 0..n {
        let xr = x.row(r);
        let t = f64::from(u8::from(dd[r]));
        for j in 0..4 {
            psi[j] = xr[j] * (t - raw[r]);
            for l in 0..4 {
                a[(j, l)] -= raw[r] * (1.0 - raw[r]) * xr[j] * xr[l] / nf;
            }
        }
        psi[4] = t * (y[r] - mu1);
        psi[5] = w[r] * (y[r] - mu0);
        psi[6] = t * (s[r] - s1);
        if !dd[r] && !clamped[r] {
            // w = exp(x'β), so ∂w/∂β = w·x.
            for l in 0..4 {
                a[(5, l)] += w[r] * (y[r] - mu0) * xr[l] / nf;
            }
        }
        a[(4, 4)] -= t / nf;
        a[(5, 5)] -= w[r] / nf;
        a[(6, 6)] -= t / nf;
        b += &psi * psi.transpose() / nf;
    }
    let a_inv = a.try_inverse().ok_or_else(|| {
        Error::Numerical("IPW estimating equations have a singular Jacobian".into())
    })?;
    let v = &a_inv * b * a_inv.transpose() / nf;
    let att = mu1 - mu0;
    let mut g_att = DVector::<f64>::zeros(k);
    g_att[4] = 1.0;
    g_att[5] = -1.0;
    let mut g_ratio = &g_att / s1;
    g_ratio[6] = -att / (s1 * s1);
    let quad = |g: &DVector<f64>| (g.transpose() * &v * g)[(0, 0)].max(0.0).sqrt();
    let range = [
        raw.iter().cloned().fold(f64::INFINITY, f64::min),
        raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    ];
    Ok(IpwFit {
        att,
        att_se: quad(&g_att),
        per_exposure: if s1 > 0.0 { att / s1 } else { f64::NAN },
        per_exposure_se: if s1 > 0.0 { quad(&g_ratio) } else { f64::NAN },
        trimmed,
        range,
    })
}

/// Cross-sectional inverse-probability-weighted ATT. The propensity of
/// being on the treated side is a logit on the controls. The direct effect
/// uses every unit; the total border effect compares the two sides within
/// the border band.
pub fn did(ds: &Dataset, ctx: &EstimatorContext) -> Result<EstimateReport> {
    ds.validate()?;
    let d = ctx.treated(ds);
    let all: Vec<usize> = (0..ds.n()).collect();
    let fit = ipw_att(ds, &all, &d)?;
    let (att, se, trimmed, range) = (fit.att, fit.att_se, fit.trimmed, fit.range);
    let mut rep = EstimateReport::new("did", ctx);
    if trimmed > 0 {
        rep.warnings.push(format!(
            "{trimmed} propensities trimmed to [{}, {}]",
            TRIM[0], TRIM[1]
        ));
    }
    let c = ctx.effect_scale;
    if fit.per_exposure.is_finite() {
        rep.direct = Estimate::new(c * fit.per_exposure, c * fit.per_exposure_se);
    } else {
        rep.warnings.push("no exposure among treated units".into());
    }
    let near: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&i| (ds.units[i].x[0] - ctx.border).abs() <= ctx.border_band)
        .collect();
    match ipw_att(ds, &near, &d) {
        Ok(f) if f.per_exposure.is_finite() => {
            rep.total_border = Estimate::new(c * f.per_exposure, c * f.per_exposure_se)
        }
        Ok(_) => rep.warnings.push("no exposure in the border band".into()),
        Err(e) if !e.is_numerical() => rep
            .warnings
            .push(format!("border-band contrast unavailable: {e}")),
        Err(e) => return Err(e),
    }
    rep.coefficients = vec![super::Coefficient {
        name: "att".into(),
        estimate: att,
        se,
    }];
    rep.covariance = vec![vec![se * se]];
    rep.diagnostics
        .insert("n_treated".into(), d.iter().filter(|&&t| t).count() as f64);
    rep.diagnostics.insert("n_trimmed".into(), trimmed as f64);
    rep.diagnostics.insert("propensity_min".into(), range[0]);
    rep.diagnostics.insert("propensity_max".into(), range[1]);
    Ok(rep)
}
