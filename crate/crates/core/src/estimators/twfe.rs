use nalgebra::DVector;

use super::{mean_where, Estimate, EstimateReport, EstimatorContext};
use crate::error::{Error, Result};
use crate::linalg::{Design, Ols};
use crate::types::Dataset;

/// Region bin of every unit along x².
pub(crate) fn x2_bins(ds: &Dataset, range: [f64; 2], n_bins: usize) -> Vec<usize> {
    let w = (range[1] - range[0]) / n_bins as f64;
    ds.units
        .iter()
        .map(|u| (((u.x[1] - range[0]) / w).floor().max(0.0) as usize).min(n_bins - 1))
        .collect()
}

/// Pseudo-panel two-way fixed effects: region bins play the role of periods
/// and the treated side the role of the unit effect. Standard errors are
/// clustered by region bin.
pub fn twfe(ds: &Dataset, n_bins: usize, ctx: &EstimatorContext) -> Result<EstimateReport> {
    if n_bins < 2 {
        return Err(Error::InvalidInput(format!("n_bins = {n_bins} < 2")));
    }
    ds.validate()?;
    let n = ds.n();
    let treated = ctx.treated(ds);
    let bins = x2_bins(ds, ctx.x2_range, n_bins);
    let s = ds.sources();
    let mut d = Design::new(n);
    d.push("S", &s);
    for k in 0..3 {
        d.push(
            format!("X{}", k + 1),
            &ds.units.iter().map(|u| u.controls[k]).collect::<Vec<_>>(),
        );
    }
    for b in 0..n_bins {
        d.push(
            format!("bin{b}"),
            &bins
                .iter()
                .map(|&g| f64::from(u8::from(g == b)))
                .collect::<Vec<_>>(),
        );
    }
    d.push(
        "D",
        &treated
            .iter()
            .map(|&t| f64::from(u8::from(t)))
            .collect::<Vec<_>>(),
    );
    let y = DVector::from_vec(ds.outcomes());
    let fit = Ols::fit(&d.x, &y)?;

    let mut rep = EstimateReport::new("twfe", ctx);
    for &j in &fit.dropped {
        rep.warnings
            .push(format!("dropped collinear regressor {}", d.names[j]));
    }
    let g = bins.iter().collect::<std::collections::BTreeSet<_>>().len() as f64;
    let k = fit.kept.len() as f64;
    let scale = if g > 1.0 {
        g / (g - 1.0) * (n as f64 - 1.0) / (n as f64 - k)
    } else {
        1.0
    };
    let cov = fit.sandwich(&fit.cluster_meat(&bins)) * scale;
    let names: Vec<String> = fit.kept.iter().map(|&j| d.names[j].clone()).collect();
    let beta: Vec<f64> = fit.kept.iter().map(|&j| fit.beta[j]).collect();
    rep.set_coefficients(&names, &beta, &cov);

    let c = ctx.effect_scale;
    let var = |a: Option<usize>, b: Option<usize>| match (a, b) {
        (Some(a), Some(b)) => cov[(a, b)],
        _ => 0.0,
    };
    let (ps, pd) = (
        fit.kept_position(0),
        fit.kept_position(d.index_of("D").expect("D column")),
    );
    rep.direct = Estimate::new(c * fit.beta[0], c * var(ps, ps).sqrt());

    let band = ctx.band(ds);
    let s_band = mean_where(&s, &band);
    if s_band > 0.0 {
        let delta = fit.beta[d.names.len() - 1];
        let (g1, g2) = (c, c / s_band);
        let v = g1 * g1 * var(ps, ps) + 2.0 * g1 * g2 * var(ps, pd) + g2 * g2 * var(pd, pd);
        rep.total_border = Estimate::new(c * fit.beta[0] + g2 * delta, v.max(0.0).sqrt());
    } else {
        rep.warnings
            .push("no exposed units in the border band".into());
    }
    rep.diagnostics.insert("n_bins".into(), n_bins as f64);
    rep.diagnostics.insert("n_clusters".into(), g);
    rep.diagnostics.insert(
        "residual_sd".into(),
        (fit.resid.norm_squared() / (n as f64 - k)).sqrt(),
    );
    Ok(rep)
}
