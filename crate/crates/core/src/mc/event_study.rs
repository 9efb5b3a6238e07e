use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::event_study_decay_test;
use crate::optim::{golden_section, nelder_mead};
use crate::pde::{transient, GridField, SolverOptions, TimeSource};
use crate::seed::SeedSpec;
use crate::types::{SpatialDomain, StructuralParams};

/// Binary-timing panel: every treated unit (x¹ > border) switches on at
/// `treat_time` with intensity 1 + slope·(α − ½) and keeps it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelDesign {
    pub params: StructuralParams,
    pub periods: usize,
    pub treat_time: usize,
    pub n_units: usize,
    pub noise_sd: f64,
    pub unit_effect_sd: f64,
    /// Common linear time trend.
    pub trend: f64,
    pub domain: SpatialDomain,
    pub border: f64,
    pub intensity_slope: f64,
    /// Implicit-Euler steps per period for the data-generating solve.
    pub substeps: usize,
    /// Steps per period inside the full-model fit.
    pub fit_substeps: usize,
    pub fit_evaluations: usize,
    /// Number of post-treatment increments used by the decay test.
    pub decay_horizon: usize,
}

impl Default for PanelDesign {
    fn default() -> Self {
        Self::no_spillovers()
    }
}

impl PanelDesign {
    pub fn no_spillovers() -> Self {
        Self {
            params: StructuralParams::new(0.0, 0.0, 0.3, 0.0),
            periods: 20,
            treat_time: 5,
            n_units: 200,
            noise_sd: 0.1,
            unit_effect_sd: 0.5,
            trend: 0.05,
            domain: SpatialDomain {
                x1_range: [0.0, 10.0],
                x2_range: [0.0, 10.0],
                alpha_range: [0.0, 1.0],
                grid: [40, 1, 9],
            },
            border: 5.0,
            intensity_slope: 0.3,
            substeps: 20,
            fit_substeps: 4,
            fit_evaluations: 250,
            decay_horizon: 6,
        }
    }

    /// Spatial, network and interaction spillovers on the unit-scaled domain.
    pub fn with_spillovers() -> Self {
        Self {
            params: StructuralParams::new(2.0, 0.5, 0.3, 0.4),
            ..Self::no_spillovers()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.ensure_valid()?;
        self.domain.validate()?;
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if !(self.treat_time >= 2 && self.treat_time < self.periods) {
            return bad("need 2 <= treat_time < periods");
        }
        if self.periods - self.treat_time < self.decay_horizon + 1 || self.decay_horizon < 3 {
            return bad("decay horizon needs at least 3 increments inside the post period");
        }
        if self.n_units < 20 || self.substeps == 0 || self.fit_substeps == 0 {
            return bad("need n_units >= 20 and positive step counts");
        }
        if !(self.noise_sd > 0.0 && self.unit_effect_sd >= 0.0) {
            return bad("noise_sd must be positive and unit_effect_sd non-negative");
        }
        if !(self.border > self.domain.x1_range[0] && self.border < self.domain.x1_range[1]) {
            return bad("border must lie inside the x1 range");
        }
        Ok(())
    }

    fn post(&self) -> usize {
        self.periods - self.treat_time
    }

    fn source(&self) -> GridField {
        let (b, sl) = (self.border, self.intensity_slope);
        GridField::from_fn(
            self.domain,
            |x1, _, a| if x1 > b { 1.0 + sl * (a - 0.5) } else { 0.0 },
        )
    }

    /// τ on the lattice at k = 0..post periods after the switch.
    fn response(
        &self,
        params: &StructuralParams,
        src: &GridField,
        substeps: usize,
    ) -> Result<Vec<GridField>> {
        let dt = 1.0 / substeps as f64;
        let rec = transient(
            params,
            &GridField::zeros(self.domain),
            TimeSource::Constant(src),
            dt,
            (self.post() - 1) as f64,
            &SolverOptions::default(),
            substeps,
        )?;
        Ok(rec.into_iter().map(|(_, f)| f).collect())
    }
}

/// Mean event-time paths, k = −treat_time..periods−treat_time−1, per unit of
/// treated-side intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelPaths {
    pub relative_time: Vec<i64>,
    pub truth: Vec<f64>,
    pub twfe: Vec<f64>,
    pub gps: Vec<f64>,
    pub restricted_pde: Vec<f64>,
    pub full_pde: Vec<f64>,
    /// Decay rate from the TWFE increments, one per replication where the
    /// test applied.
    pub decay_kappa: Vec<f64>,
    pub replications: usize,
    pub failures: usize,
}

impl PanelPaths {
    pub fn series(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("truth", &self.truth),
            ("twfe", &self.twfe),
            ("gps", &self.gps),
            ("restricted_pde", &self.restricted_pde),
            ("full_pde", &self.full_pde),
        ]
    }

    /// Mean over the last `last` event times.
    pub fn plateau(path: &[f64], last: usize) -> f64 {
        let t = &path[path.len() - last.min(path.len())..];
        t.iter().sum::<f64>() / t.len() as f64
    }

    pub fn mean_decay_kappa(&self) -> f64 {
        self.decay_kappa.iter().sum::<f64>() / self.decay_kappa.len() as f64
    }
}

struct Replication {
    truth: Vec<f64>,
    twfe: Vec<f64>,
    gps: Vec<f64>,
    restricted: Vec<f64>,
    full: Vec<f64>,
    decay_kappa: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn replicate(
    design: &PanelDesign,
    src: &GridField,
    tau: &[GridField],
    seed: SeedSpec,
) -> Result<Replication> {
    let (n, t_all, t0, post) = (
        design.n_units,
        design.periods,
        design.treat_time,
        design.post(),
    );
    let mut rng = seed.rng("units", 0);
    let [x1r, x2r, ar] = design.domain.ranges();
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(x1r[0]..x1r[1]),
                rng.random_range(x2r[0]..x2r[1]),
                rng.random_range(ar[0]..ar[1]),
            ]
        })
        .collect();
    let treated: Vec<bool> = pts.iter().map(|p| p[0] > design.border).collect();
    let n1 = treated.iter().filter(|&&d| d).count();
    if n1 < 5 || n - n1 < 5 {
        return Err(Error::InsufficientData(
            "too few units on one side of the border".into(),
        ));
    }
    let s: Vec<f64> = pts
        .iter()
        .map(|&p| src.interpolate_sided(p, design.border))
        .collect();
    let s_bar = mean((0..n).filter(|&i| treated[i]).map(|i| s[i]));
    let tau_at = |fields: &[GridField], i: usize, t: usize| {
        if t < t0 {
            0.0
        } else {
            fields[t - t0].interpolate_sided(pts[i], design.border)
        }
    };

    let noise = Normal::new(0.0, design.noise_sd).expect("positive sd");
    let fe = Normal::new(0.0, design.unit_effect_sd.max(f64::MIN_POSITIVE)).expect("positive sd");
    let mut yr = seed.rng("outcomes", 0);
    let mu: Vec<f64> = (0..n).map(|_| fe.sample(&mut yr)).collect();
    let y: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..t_all)
                .map(|t| {
                    mu[i] + design.trend * t as f64 + tau_at(tau, i, t) + noise.sample(&mut yr)
                })
                .collect()
        })
        .collect();

    let truth: Vec<f64> = (0..t_all)
        .map(|t| mean((0..n).filter(|&i| treated[i]).map(|i| tau_at(tau, i, t))) / s_bar)
        .collect();
    let side_mean = |t: usize, d: bool| mean((0..n).filter(|&i| treated[i] == d).map(|i| y[i][t]));
    let r = t0 - 1;
    // With a single adoption date the two-way fixed effects event-study
    // coefficients are the difference in side means relative to the
    // reference period.
    let contrast = |t: usize| {
        (side_mean(t, true) - side_mean(t, false)) - (side_mean(r, true) - side_mean(r, false))
    };
    let twfe: Vec<f64> = (0..t_all).map(|t| contrast(t) / s_bar).collect();

    let gps: Vec<f64> = (0..t_all)
        .map(|t| {
            let dy: Vec<f64> = (0..n).map(|i| y[i][t] - y[i][r]).collect();
            let (ms, md) = (mean(s.iter().copied()), mean(dy.iter().copied()));
            let sxy: f64 = (0..n).map(|i| (s[i] - ms) * (dy[i] - md)).sum();
            let sxx: f64 = s.iter().map(|v| (v - ms).powi(2)).sum();
            sxy / sxx
        })
        .collect();

    // Post-period outcome changes net of the period mean, which removes the
    // unit and time effects; model predictions are demeaned the same way.
    let resid: Vec<Vec<f64>> = (0..post)
        .map(|k| {
            let dy: Vec<f64> = (0..n).map(|i| y[i][t0 + k] - y[i][r]).collect();
            let m = mean(dy.iter().copied());
            dy.iter().map(|v| v - m).collect()
        })
        .collect();
    let sse = |pred: &dyn Fn(usize, usize) -> f64| -> f64 {
        let mut total = 0.0;
        for (k, row) in resid.iter().enumerate() {
            let m = mean((0..n).map(|i| pred(i, k)));
            total += (0..n)
                .map(|i| (row[i] - (pred(i, k) - m)).powi(2))
                .sum::<f64>();
        }
        total
    };

    let g = |kappa: f64, k: usize| (1.0 - (-kappa * k as f64).exp()) / kappa;
    let (log_kappa, _) = golden_section(
        &mut |lk: f64| sse(&|i, k| s[i] * g(lk.exp(), k)),
        (0.01f64).ln(),
        (5.0f64).ln(),
        1e-8,
    );
    let kr = log_kappa.exp();
    let restricted: Vec<f64> = (0..t_all)
        .map(|t| if t < t0 { 0.0 } else { g(kr, t - t0) })
        .collect();

    let fit_dt = 1.0 / design.fit_substeps as f64;
    let to_params = |u: &[f64]| {
        let (ns, nn) = (u[0] * u[0], u[1] * u[1]);
        let kappa = u[2].exp();
        StructuralParams::new(
            ns,
            nn,
            kappa,
            u[3].tanh() * 2.0 * (ns * nn).sqrt() * (1.0 - 1e-9),
        )
    };
    let mut objective = |u: &[f64]| {
        let p = to_params(u);
        if !(p.kappa * fit_dt < 0.95 && p.kappa > 1e-3 && p.nu_s < 1e3 && p.nu_n < 1e3) {
            return f64::INFINITY;
        }
        match design.response(&p, src, design.fit_substeps) {
            Ok(f) => {
                let vals: Vec<Vec<f64>> = f
                    .iter()
                    .map(|fk| {
                        (0..n)
                            .map(|i| fk.interpolate_sided(pts[i], design.border))
                            .collect()
                    })
                    .collect();
                sse(&|i, k| vals[k][i])
            }
            Err(_) => f64::INFINITY,
        }
    };
    let start = [1.0, 0.5, (0.5f64).ln(), 0.0];
    let m = nelder_mead(
        &mut objective,
        &start,
        &[0.5, 0.3, 0.5, 0.5],
        1e-10,
        1e-6,
        design.fit_evaluations,
    );
    let fitted = design.response(&to_params(&m.x), src, design.fit_substeps)?;
    let full: Vec<f64> = (0..t_all)
        .map(|t| {
            mean(
                (0..n)
                    .filter(|&i| treated[i])
                    .map(|i| tau_at(&fitted, i, t)),
            ) / s_bar
        })
        .collect();

    let inc: Vec<(f64, f64)> = (0..design.decay_horizon)
        .map(|k| {
            let (a, b) = (t0 + k, t0 + k + 1);
            let side = |d: bool| {
                let v: Vec<f64> = (0..n)
                    .filter(|&i| treated[i] == d)
                    .map(|i| y[i][b] - y[i][a])
                    .collect();
                let m = mean(v.iter().copied());
                let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
                (m, var / v.len() as f64)
            };
            let ((m1, v1), (m0, v0)) = (side(true), side(false));
            ((m1 - m0) / s_bar, (v1 + v0).sqrt() / s_bar)
        })
        .collect();
    let decay_kappa = match event_study_decay_test(&inc, 1.0) {
        Ok(d) if d.applicable => Some(d.kappa_hat),
        _ => None,
    };
    Ok(Replication {
        truth,
        twfe,
        gps,
        restricted,
        full,
        decay_kappa,
    })
}

/// Averages event-time paths over `m` simulated panels. Replications are
/// independent streams derived from `seed`, reduced in index order.
pub fn event_study_panel(design: &PanelDesign, m: usize, seed: SeedSpec) -> Result<PanelPaths> {
    design.validate()?;
    if m == 0 {
        return Err(Error::InvalidInput("need at least one replication".into()));
    }
    let src = design.source();
    let tau = design.response(&design.params, &src, design.substeps)?;
    let reps: Vec<Result<Replication>> = (0..m)
        .into_par_iter()
        .map(|r| replicate(design, &src, &tau, seed.child("panel", r as u64)))
        .collect();
    let ok: Vec<&Replication> = reps.iter().filter_map(|r| r.as_ref().ok()).collect();
    if ok.is_empty() {
        return Err(Error::Numerical("every panel replication failed".into()));
    }
    let avg = |f: &dyn Fn(&Replication) -> &Vec<f64>| -> Vec<f64> {
        (0..design.periods)
            .map(|t| ok.iter().map(|r| f(r)[t]).sum::<f64>() / ok.len() as f64)
            .collect()
    };
    Ok(PanelPaths {
        relative_time: (0..design.periods)
            .map(|t| t as i64 - design.treat_time as i64)
            .collect(),
        truth: avg(&|r| &r.truth),
        twfe: avg(&|r| &r.twfe),
        gps: avg(&|r| &r.gps),
        restricted_pde: avg(&|r| &r.restricted),
        full_pde: avg(&|r| &r.full),
        decay_kappa: ok.iter().filter_map(|r| r.decay_kappa).collect(),
        replications: m,
        failures: m - ok.len(),
    })
}

/// Long-format CSV: panel, relative time and one column per series.
pub fn write_event_study(path: &std::path::Path, panels: &[(&str, &PanelPaths)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "panel",
        "relative_time",
        "truth",
        "twfe",
        "gps",
        "restricted_pde",
        "full_pde",
    ])?;
    for (name, p) in panels {
        for (t, &k) in p.relative_time.iter().enumerate() {
            let mut row = vec![name.to_string(), k.to_string()];
            row.extend(p.series().iter().map(|(_, s)| format!("{:.16e}", s[t])));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
