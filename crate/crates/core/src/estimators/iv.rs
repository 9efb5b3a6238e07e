use nalgebra::{DMatrix, DVector};

use super::{
    mean_where, network_exposure, Estimate, EstimateReport, EstimatorContext, TestStatistic,
};
use crate::error::{Error, Result};
use crate::linalg::{f_sf, spd_inverse, Design, Ols};
use crate::types::Dataset;

/// Weak-instrument threshold on the first-stage F.
const WEAK_F: f64 = 4.0;

/// Two-stage least squares of Y on exposure S and network exposure Ñ = G·S,
/// with Ñ instrumented by exposure through the lagged network.
pub fn network_iv(ds: &Dataset, ctx: &EstimatorContext) -> Result<EstimateReport> {
    ds.validate()?;
    let n = ds.n();
    if ds.lagged_network.n() != n {
        return Err(Error::InvalidInput(
            "network IV needs a lagged network".into(),
        ));
    }
    let s = ds.sources();
    let nt = network_exposure(&ds.network, &s);
    let z = network_exposure(&ds.lagged_network, &s);
    let ctrl = |k: usize| ds.units.iter().map(|u| u.controls[k]).collect::<Vec<_>>();

    let mut xd = Design::new(n);
    let mut zd = Design::new(n);
    for (d, third) in [(&mut xd, ("N_tilde", &nt)), (&mut zd, ("Z_lag", &z))] {
        d.push("intercept", &vec![1.0; n]);
        d.push("S", &s);
        d.push(third.0, third.1);
        for k in 0..3 {
            d.push(format!("X{}", k + 1), &ctrl(k));
        }
    }
    let y = DVector::from_vec(ds.outcomes());
    let mut rep = EstimateReport::new("network_iv", ctx);

    // First stage and its F for the excluded instrument.
    let fs = Ols::fit(&zd.x, &DVector::from_row_slice(&nt))?;
    let Some(pz) = fs.kept_position(2) else {
        return Err(Error::InsufficientData(
            "lagged-network instrument is collinear with the other regressors".into(),
        ));
    };
    let kz = fs.kept.len();
    let s2 = fs.resid.norm_squared() / (n - kz) as f64;
    let f_stat = fs.beta[2].powi(2) / (s2 * fs.xtx_inv[(pz, pz)]);
    rep.tests.push(TestStatistic {
        name: "first_stage_f".into(),
        statistic: f_stat,
        dof: 1.0,
        p_value: f_sf(f_stat, 1.0, (n - kz) as f64),
    });
    rep.diagnostics.insert("first_stage_f".into(), f_stat);
    if !(f_stat >= WEAK_F) {
        rep.warnings.push(format!(
            "weak instrument: first-stage F = {f_stat:.3} < {WEAK_F}"
        ));
    }

    let kept = &fs.kept;
    if kept.len() != zd.names.len() {
        for j in (0..zd.names.len()).filter(|j| !kept.contains(j)) {
            rep.warnings
                .push(format!("dropped collinear regressor {}", xd.names[j]));
        }
    }
    let sel = |m: &DMatrix<f64>| crate::linalg::select_columns(m, kept);
    let (xk, zk) = (sel(&xd.x), sel(&zd.x));
    let ztz_inv = spd_inverse(&(zk.transpose() * &zk))?;
    let xz = xk.transpose() * &zk;
    let a_inv = spd_inverse(&(&xz * &ztz_inv * xz.transpose()))?;
    let proj = &a_inv * &xz * &ztz_inv;
    let beta = &proj * (zk.transpose() * &y);
    let resid = &y - &xk * &beta;
    let k = kept.len();
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        let zi = zk.row(i).transpose() * resid[i];
        meat += &zi * zi.transpose();
    }
    let cov = &proj * meat * proj.transpose() * (n as f64 / (n - k) as f64);
    let names: Vec<String> = kept.iter().map(|&j| xd.names[j].clone()).collect();
    rep.set_coefficients(&names, beta.as_slice(), &cov);

    let pos = |name: &str| names.iter().position(|v| v == name);
    let (Some(ps), pn) = (pos("S"), pos("N_tilde")) else {
        return Err(Error::InsufficientData(
            "exposure S has no variation".into(),
        ));
    };
    let c = ctx.effect_scale;
    rep.direct = Estimate::new(c * beta[ps], c * cov[(ps, ps)].max(0.0).sqrt());
    let band = ctx.band(ds);
    let (sb, nb) = (mean_where(&s, &band), mean_where(&nt, &band));
    if sb > 0.0 {
        let (bn, vnn, vsn) = match pn {
            Some(p) => (beta[p], cov[(p, p)], cov[(ps, p)]),
            None => (0.0, 0.0, 0.0),
        };
        let r = nb / sb;
        let var = cov[(ps, ps)] + 2.0 * r * vsn + r * r * vnn;
        rep.total_border = Estimate::new(c * (beta[ps] + bn * r), c * var.max(0.0).sqrt());
    } else {
        rep.warnings
            .push("no exposed units in the border band".into());
    }
    Ok(rep)
}
