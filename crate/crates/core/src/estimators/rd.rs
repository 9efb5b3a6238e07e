use nalgebra::{DMatrix, DVector};

use super::{mean_where, Coefficient, Estimate, EstimateReport, EstimatorContext};
use crate::error::{Error, Result};
use crate::linalg::{pinv_sym, Design, Ols};
use crate::types::Dataset;

const MIN_PER_SIDE: usize = 20;
/// Triangular-kernel constant of the optimal bandwidth.
const C_TRIANGULAR: f64 = 3.4375;

fn triangular(u: f64) -> f64 {
    (1.0 - u.abs()).max(0.0)
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Polynomial fit of `y` on powers of `x` up to `degree` with unit weights;
/// returns the coefficients or `None` when the design is singular.
fn poly_fit(x: &[f64], y: &[f64], degree: usize) -> Option<DVector<f64>> {
    let n = x.len();
    if n <= degree + 1 {
        return None;
    }
    let mut d = Design::new(n);
    for p in 0..=degree {
        d.push(
            format!("p{p}"),
            &x.iter().map(|v| v.powi(p as i32)).collect::<Vec<_>>(),
        );
    }
    let f = Ols::fit(&d.x, &DVector::from_row_slice(y)).ok()?;
    (f.dropped.is_empty()).then_some(f.beta)
}

/// Bandwidth of the local linear boundary estimator following Imbens and
/// Kalyanaraman. `x` is the running variable centred at the cutoff; units
/// with x > 0 are treated. Returns the bandwidth and the intermediate
/// quantities as named diagnostics.
pub fn ik_bandwidth(x: &[f64], y: &[f64]) -> Result<(f64, Vec<(&'static str, f64)>)> {
    let n = x.len();
    let (n_l, n_r) = (
        x.iter().filter(|&&v| v <= 0.0).count(),
        x.iter().filter(|&&v| v > 0.0).count(),
    );
    if n_l < 3 || n_r < 3 {
        return Err(Error::InsufficientData(
            "both sides of the cutoff need observations".into(),
        ));
    }
    let h1 = 1.84 * variance(x).sqrt() * (n as f64).powf(-0.2);
    let side = |lo: f64, hi: f64, right: bool| -> (Vec<f64>, Vec<f64>) {
        x.iter()
            .zip(y)
            .filter(|(&v, _)| (v > 0.0) == right && v >= lo && v <= hi)
            .map(|(&v, &w)| (v, w))
            .unzip()
    };
    let (_, yl) = side(-h1, 0.0, false);
    let (_, yr) = side(0.0, h1, true);
    if yl.len() < 2 || yr.len() < 2 {
        return Err(Error::InsufficientData(
            "too few observations near the cutoff".into(),
        ));
    }
    let ss = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|a| (a - m).powi(2)).sum::<f64>()
    };
    let sigma2 = (ss(&yl) + ss(&yr)) / (yl.len() + yr.len()) as f64;
    let f0 = (yl.len() + yr.len()) as f64 / (2.0 * n as f64 * h1);

    // Third derivative from a global cubic with a jump, fitted between the
    // side medians.
    let mut left: Vec<f64> = x.iter().copied().filter(|&v| v <= 0.0).collect();
    let mut right: Vec<f64> = x.iter().copied().filter(|&v| v > 0.0).collect();
    let (ml, mr) = (median(&mut left), median(&mut right));
    let mut d = Design::new(0);
    let mut yy = Vec::new();
    let rows: Vec<usize> = (0..n).filter(|&i| x[i] >= ml && x[i] <= mr).collect();
    if rows.len() > 5 {
        d = Design::new(rows.len());
        d.push("one", &vec![1.0; rows.len()]);
        d.push(
            "jump",
            &rows
                .iter()
                .map(|&i| f64::from(u8::from(x[i] > 0.0)))
                .collect::<Vec<_>>(),
        );
        for p in 1..=3 {
            d.push(
                format!("p{p}"),
                &rows.iter().map(|&i| x[i].powi(p)).collect::<Vec<_>>(),
            );
        }
        yy = rows.iter().map(|&i| y[i]).collect();
    }
    let m3 = if yy.is_empty() {
        0.0
    } else {
        let f = Ols::fit(&d.x, &DVector::from_vec(yy))?;
        6.0 * f.beta[4]
    };

    let mut diag = vec![
        ("ik_pilot_bandwidth", h1),
        ("ik_sigma2", sigma2),
        ("ik_density", f0),
        ("ik_m3", m3),
    ];
    let fallback = |mut diag: Vec<(&'static str, f64)>| {
        diag.push(("ik_fallback", 1.0));
        Ok((h1, diag))
    };
    if !(sigma2 > 0.0) || m3 == 0.0 {
        return fallback(diag);
    }
    let h2 = |n_side: usize| {
        3.56 * (sigma2 / (f0 * m3 * m3)).powf(1.0 / 7.0) * (n_side as f64).powf(-1.0 / 7.0)
    };
    let (h2l, h2r) = (h2(n_l), h2(n_r));
    let (xl, yl2) = side(-h2l, 0.0, false);
    let (xr, yr2) = side(0.0, h2r, true);
    let (Some(ql), Some(qr)) = (poly_fit(&xl, &yl2, 2), poly_fit(&xr, &yr2, 2)) else {
        return fallback(diag);
    };
    let (m2l, m2r) = (2.0 * ql[2], 2.0 * qr[2]);
    let r_l = 2160.0 * sigma2 / (xl.len() as f64 * h2l.powi(4));
    let r_r = 2160.0 * sigma2 / (xr.len() as f64 * h2r.powi(4));
    let h = C_TRIANGULAR
        * (2.0 * sigma2 / f0 / ((m2r - m2l).powi(2) + r_l + r_r)).powf(0.2)
        * (n as f64).powf(-0.2);
    diag.extend([
        ("ik_m2_left", m2l),
        ("ik_m2_right", m2r),
        ("ik_reg_left", r_l),
        ("ik_reg_right", r_r),
    ]);
    if !h.is_finite() || h <= 0.0 {
        return fallback(diag);
    }
    Ok((h, diag))
}

/// Local linear estimate of the jump at x = 0 with a triangular kernel.
/// Returns (jump, se, units left, units right).
pub fn local_linear_discontinuity(
    x: &[f64],
    y: &[f64],
    h: f64,
) -> Result<(f64, f64, usize, usize)> {
    let fit_side = |right: bool| -> Result<(f64, f64, usize)> {
        let rows: Vec<usize> = (0..x.len())
            .filter(|&i| (x[i] > 0.0) == right && x[i].abs() < h)
            .collect();
        if rows.len() < MIN_PER_SIDE {
            return Err(Error::InsufficientData(format!(
                "{} units on the {} side within bandwidth {h:.3}, need {MIN_PER_SIDE}",
                rows.len(),
                if right { "treated" } else { "control" }
            )));
        }
        let mut xtwx = DMatrix::<f64>::zeros(2, 2);
        let mut xtwy = DVector::<f64>::zeros(2);
        for &i in &rows {
            let w = triangular(x[i] / h);
            let z = DVector::from_row_slice(&[1.0, x[i]]);
            xtwx += &z * z.transpose() * w;
            xtwy += z * (w * y[i]);
        }
        let inv = xtwx.try_inverse().ok_or_else(|| {
            Error::InsufficientData("running variable does not vary within bandwidth".into())
        })?;
        let b = &inv * xtwy;
        let mut meat = DMatrix::<f64>::zeros(2, 2);
        for &i in &rows {
            let w = triangular(x[i] / h);
            let z = DVector::from_row_slice(&[1.0, x[i]]);
            let e = y[i] - b[0] - b[1] * x[i];
            meat += &z * z.transpose() * (w * w * e * e);
        }
        let v = &inv * meat * &inv;
        Ok((b[0], v[(0, 0)], rows.len()))
    };
    let (al, vl, nl) = fit_side(false)?;
    let (ar, vr, nr) = fit_side(true)?;
    Ok((ar - al, (vl + vr).sqrt(), nl, nr))
}

struct Attenuation {
    beta: DVector<f64>,
    ell: f64,
    cov: DMatrix<f64>,
}

/// Y = a + W'γ + A·D + B·exp(−d/ℓ)·(1 − 2D), profiled over ℓ.
fn fit_attenuation(d: &[f64], treated: &[bool], w: &[[f64; 3]], y: &[f64]) -> Result<Attenuation> {
    let n = d.len();
    let design = |ell: f64| {
        let mut x = DMatrix::<f64>::zeros(n, 6);
        for i in 0..n {
            let sgn = if treated[i] { -1.0 } else { 1.0 };
            x[(i, 0)] = 1.0;
            for k in 0..3 {
                x[(i, 1 + k)] = w[i][k];
            }
            x[(i, 4)] = f64::from(u8::from(treated[i]));
            x[(i, 5)] = sgn * (-d[i] / ell).exp();
        }
        x
    };
    let yv = DVector::from_row_slice(y);
    let ssr = |ell: f64| {
        Ols::fit(&design(ell), &yv)
            .map(|f| f.resid.norm_squared())
            .unwrap_or(f64::INFINITY)
    };
    let (lo, hi) = (1.0f64.ln(), 200.0f64.ln());
    let grid: Vec<f64> = (0..40).map(|k| lo + (hi - lo) * k as f64 / 39.0).collect();
    let vals: Vec<f64> = grid.iter().map(|&g| ssr(g.exp())).collect();
    let kbest = (0..grid.len())
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .expect("non-empty grid");
    let (mut a, mut b) = (
        grid[kbest.saturating_sub(1)],
        grid[(kbest + 1).min(grid.len() - 1)],
    );
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut e) = (b - gr * (b - a), a + gr * (b - a));
    let (mut fc, mut fe) = (ssr(c.exp()), ssr(e.exp()));
    for _ in 0..40 {
        if fc < fe {
            b = e;
            e = c;
            fe = fc;
            c = b - gr * (b - a);
            fc = ssr(c.exp());
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + gr * (b - a);
            fe = ssr(e.exp());
        }
    }
    let ell = (0.5 * (a + b)).exp();
    let x = design(ell);
    let fit = Ols::fit(&x, &yv)?;
    let beta = fit.beta.clone();
    // Sandwich over (a, γ, A, B, ℓ) with ℓ entering through its derivative.
    let mut j = x.clone().insert_column(6, 0.0);
    for i in 0..n {
        j[(i, 6)] = beta[5] * x[(i, 5)] * d[i] / (ell * ell);
    }
    let bread = pinv_sym(&(j.transpose() * &j), 1e-12);
    let mut meat = DMatrix::<f64>::zeros(7, 7);
    let resid = &yv - &x * &beta;
    for i in 0..n {
        let g = j.row(i).transpose() * resid[i];
        meat += &g * g.transpose();
    }
    let scale = n as f64 / (n as f64 - 7.0);
    Ok(Attenuation {
        beta,
        ell,
        cov: &bread * meat * &bread * scale,
    })
}

/// Spatial regression discontinuity at the border. The local linear jump of
/// the outcome is reported as a diagnostic; the effects come from an
/// exponential attenuation model of the outcome gap with distance, whose
/// far-field level is the unspilled treatment.
pub fn spatial_rd(
    ds: &Dataset,
    bandwidth: Option<f64>,
    ctx: &EstimatorContext,
) -> Result<EstimateReport> {
    ds.validate()?;
    let x: Vec<f64> = ds.units.iter().map(|u| u.x[0] - ctx.border).collect();
    let y = ds.outcomes();
    let mut rep = EstimateReport::new("spatial_rd", ctx);
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => {
            return Err(Error::InvalidInput(format!(
                "bandwidth {h} must be positive"
            )))
        }
        None => {
            let (h, diag) = ik_bandwidth(&x, &y)?;
            for (k, v) in diag {
                rep.diagnostics.insert(k.into(), v);
            }
            if rep.diagnostics.contains_key("ik_fallback") {
                rep.warnings
                    .push("optimal bandwidth undefined; pilot bandwidth used".into());
            }
            h
        }
    };
    let (jump, jump_se, nl, nr) = local_linear_discontinuity(&x, &y, h)?;
    rep.diagnostics.insert("bandwidth".into(), h);
    rep.diagnostics.insert("discontinuity".into(), jump);
    rep.diagnostics.insert("discontinuity_se".into(), jump_se);
    rep.diagnostics.insert("n_left".into(), nl as f64);
    rep.diagnostics.insert("n_right".into(), nr as f64);

    let treated = ctx.treated(ds);
    let d: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    let w: Vec<[f64; 3]> = ds.units.iter().map(|u| u.controls).collect();
    let att = fit_attenuation(&d, &treated, &w, &y)?;
    let s = ds.sources();
    let s1 = mean_where(&s, &treated);
    let band = ctx.band(ds);
    let sb = mean_where(&s, &band);
    let c = ctx.effect_scale;
    let (big_a, big_b, ell) = (att.beta[4], att.beta[5], att.ell);
    let v = |i: usize, j: usize| att.cov[(i, j)];
    if s1 > 0.0 {
        rep.direct = Estimate::new(c * big_a / s1, c * v(4, 4).max(0.0).sqrt() / s1);
    } else {
        rep.warnings.push("no exposure on the treated side".into());
    }
    let nb = band.iter().filter(|&&b| b).count();
    if nb > 0 && sb > 0.0 {
        let e_bar = mean_where(
            &d.iter().map(|&di| (-di / ell).exp()).collect::<Vec<_>>(),
            &band,
        );
        let de_bar = mean_where(
            &d.iter()
                .map(|&di| (-di / ell).exp() * di / (ell * ell))
                .collect::<Vec<_>>(),
            &band,
        );
        let level = big_a - big_b * e_bar;
        // Gradient over (A, B, ℓ) at positions 4, 5, 6.
        let g = [1.0, -e_bar, -big_b * de_bar];
        let idx = [4, 5, 6];
        let mut var = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                var += g[a] * g[b] * v(idx[a], idx[b]);
            }
        }
        rep.total_border = Estimate::new(c * level / sb, c * var.max(0.0).sqrt() / sb);
    } else {
        rep.warnings
            .push("no exposed units in the border band".into());
    }
    let names = [
        "intercept",
        "X1",
        "X2",
        "X3",
        "far_field_gap",
        "border_attenuation",
        "decay_length",
    ];
    let mut est: Vec<f64> = att.beta.iter().copied().collect();
    est.push(ell);
    rep.coefficients = names
        .iter()
        .zip(&est)
        .enumerate()
        .map(|(i, (n, &e))| Coefficient {
            name: n.to_string(),
            estimate: e,
            se: v(i, i).max(0.0).sqrt(),
        })
        .collect();
    rep.covariance = (0..7).map(|i| (0..7).map(|j| v(i, j)).collect()).collect();
    rep.diagnostics.insert("decay_length".into(), ell);
    rep.diagnostics.insert("ik_constant".into(), C_TRIANGULAR);
    Ok(rep)
}
