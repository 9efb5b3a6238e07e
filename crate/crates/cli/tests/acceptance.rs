//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL line
//! on the real stdout (bypassing the test harness capture) so the verdicts
//! show up in plain `cargo test` logs. A failing criterion does not fail the
//! test unless ACCEPTANCE_STRICT=1 is set; infrastructure errors always do.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use spnet_core::dgp::{
    make_geography, simulate_dataset, simulate_dataset_with_field, treatment_field, DgpSettings,
};
use spnet_core::estimators::{
    default_transform, full_gmm, mutual_information, spillover_test, EstimatorContext,
};
use spnet_core::fk::{fk_effect, sensitivity_fd, sensitivity_kappa, PathSpec};
use spnet_core::mc::{
    event_study_panel, find_cell, run_mc, summarize, uncertainty_table, EstimatorOptions, McCell,
    McPlan, PanelDesign, PanelPaths, Target, UncertaintyOptions, ESTIMATORS,
};
use spnet_core::pde::*;
use spnet_core::seed::SeedSpec;
use spnet_core::{config_params, ConfigId, SpatialDomain, StructuralParams};

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Verdicts(Vec<(usize, bool)>);

impl Verdicts {
    fn record(&mut self, n: usize, ok: bool, summary: String, details: &[String]) {
        say(&format!(
            "criterion {n:>2}: {} {summary}",
            if ok { "PASS" } else { "FAIL" }
        ));
        for d in details {
            say(&format!("    {d}"));
        }
        self.0.push((n, ok));
    }
}

/// Direct-effect bias reported for 1000 replications, by config then estimator
/// in reporting order.
const PUBLISHED_BIAS: [[f64; 6]; 4] = [
    [0.002, 0.001, -0.001, 0.003, 0.002, 0.001],
    [-0.031, -0.028, -0.029, 0.004, -0.030, 0.002],
    [-0.025, -0.023, -0.024, -0.024, 0.003, 0.001],
    [-0.038, -0.035, -0.036, 0.002, -0.012, 0.003],
];

fn in_range(x: f64, lo: f64, hi: f64) -> bool {
    x >= lo && x <= hi
}

fn cell<'a>(cells: &'a [McCell], c: ConfigId, est: &str, t: Target) -> &'a McCell {
    find_cell(cells, c, est, t).unwrap_or_else(|| panic!("missing cell {c} {est} {}", t.as_str()))
}

fn bias_table(v: &mut Verdicts, cells: &[McCell], minutes: f64) {
    let mut details = Vec::new();
    let mut passed = 0;
    for (ci, c) in ConfigId::ALL.into_iter().enumerate() {
        for (ei, est) in ESTIMATORS.iter().enumerate() {
            let x = cell(cells, c, est, Target::Direct);
            let tol = 0.012 + 2.0 * x.bias_mc_se;
            let ok = (x.bias - PUBLISHED_BIAS[ci][ei]).abs() <= tol;
            passed += ok as usize;
            details.push(format!(
                "{} {:<10} {:<10} bias {:+.4} (mc se {:.4}) vs {:+.3} ±{:.4}{}",
                if ok { "ok  " } else { "MISS" },
                c.as_str(),
                est,
                x.bias,
                x.bias_mc_se,
                PUBLISHED_BIAS[ci][ei],
                tol,
                if x.unreliable { " unreliable" } else { "" }
            ));
        }
    }
    let twfe4 = cell(cells, ConfigId::FullModel, "twfe", Target::Direct).bias;
    let twfe_ok = in_range(twfe4, -0.055, -0.021);
    let gmm: Vec<f64> = ConfigId::ALL
        .iter()
        .map(|&c| cell(cells, c, "full_gmm", Target::Direct).bias)
        .collect();
    let gmm_ok = gmm.iter().all(|b| b.abs() <= 0.012);
    let time_ok = minutes <= 120.0;
    details.push(format!(
        "twfe full_model direct bias {twfe4:+.4} in [-0.055, -0.021]: {twfe_ok}"
    ));
    details.push(format!(
        "full_gmm |bias| <= 0.012 in every config {gmm:.4?}: {gmm_ok}"
    ));
    v.record(
        1,
        passed == 24 && twfe_ok && gmm_ok && time_ok,
        format!("bias cells {passed}/24 within tolerance, sweep {minutes:.1} min"),
        &details,
    );
}

fn coverage_table(v: &mut Verdicts, cells: &[McCell]) {
    let mut details = Vec::new();
    let mut ok = true;
    for c in ConfigId::ALL {
        for t in [Target::Direct, Target::TotalBorder] {
            let x = cell(cells, c, "full_gmm", t).coverage;
            let good = in_range(x, 0.91, 0.98);
            ok &= good;
            details.push(format!(
                "full_gmm {:<14} {:<12} coverage {x:.3} {}",
                c.as_str(),
                t.as_str(),
                verdict(good)
            ));
        }
    }
    let twfe = cell(cells, ConfigId::FullModel, "twfe", Target::TotalBorder).coverage;
    ok &= twfe <= 0.35;
    details.push(format!(
        "twfe full_model total_border coverage {twfe:.3} <= 0.35 {}",
        verdict(twfe <= 0.35)
    ));
    for est in ESTIMATORS {
        for t in [Target::Direct, Target::TotalBorder] {
            let x = cell(cells, ConfigId::NoSpillovers, est, t).coverage;
            let good = in_range(x, 0.91, 0.98);
            ok &= good;
            details.push(format!(
                "no_spillovers {est:<10} {:<12} coverage {x:.3} {}",
                t.as_str(),
                verdict(good)
            ));
        }
    }
    v.record(
        2,
        ok,
        "coverage of full_gmm, twfe in full_model, and every estimator without spillovers".into(),
        &details,
    );
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "MISS"
    }
}

fn risk_profile(v: &mut Verdicts, cells: &[McCell]) {
    let mut details = Vec::new();
    let mut ok = true;
    for c in [ConfigId::NoSpillovers, ConfigId::FullModel] {
        for t in [Target::Direct, Target::TotalBorder] {
            let x = cell(cells, c, "full_gmm", t).coverage;
            let good = in_range(x, 0.92, 0.98);
            ok &= good;
            details.push(format!(
                "full_gmm {:<14} {:<12} coverage {x:.3} in [0.92, 0.98] {}",
                c.as_str(),
                t.as_str(),
                verdict(good)
            ));
        }
    }
    for est in ["twfe", "did", "gps"] {
        let x = cell(cells, ConfigId::FullModel, est, Target::TotalBorder).coverage;
        ok &= x < 0.45;
        details.push(format!(
            "{est:<4} full_model total_border coverage {x:.3} < 0.45 {}",
            verdict(x < 0.45)
        ));
    }
    v.record(
        3,
        ok,
        "one-sided risk profile on the same sweep".into(),
        &details,
    );
}

fn pde_oracles(v: &mut Verdicts) {
    let start = Instant::now();
    let opts = SolverOptions::default();

    let d = SpatialDomain {
        x1_range: [0.0, 400.0],
        grid: [801, 1, 1],
        ..SpatialDomain::default()
    };
    let (nu, kappa, mass, x0) = (100.0, 0.25, 3.0, 200.0);
    let h = d.spacing()[0];
    let s = GridField::from_fn(
        d,
        |x, _, _| if (x - x0).abs() < 1e-9 { mass / h } else { 0.0 },
    );
    let tau = steady_state_linear(&StructuralParams::new(nu, 0.0, kappa, 0.0), &s, &opts).unwrap();
    let ell = (nu / kappa).sqrt();
    let mut green = 0.0f64;
    for i in 0..801 {
        let r = (d.node(0, i) - x0).abs();
        if (2.0..=100.0).contains(&r) {
            let exact = mass / (2.0 * (nu * kappa).sqrt()) * (-r / ell).exp();
            green = green.max((tau.at(i, 0, 0) - exact).abs() / exact);
        }
    }

    let d = SpatialDomain::default().with_grid([24, 24, 8]);
    let uniform = GridField::constant(d, 0.1);
    let mut flat = 0.0f64;
    for c in ConfigId::ALL {
        let p = config_params(c);
        let lin = steady_state_linear(&p, &uniform, &opts).unwrap();
        let full = steady_state_dgp(&p, &uniform, &opts).unwrap();
        for t in lin.values.iter().chain(&full.values) {
            flat = flat.max((t - 0.1 / p.kappa).abs());
        }
    }

    let pi = std::f64::consts::PI;
    let p = StructuralParams::new(100.0, 0.05, 0.25, 0.0);
    let mode_error = |nx: usize, na: usize| {
        let d = SpatialDomain::default().with_grid([nx, 1, na]);
        let s = GridField::from_fn(d, |x, _, a| (pi * x / 100.0).cos() * (pi * a).cos());
        let denom = p.kappa + p.nu_s * (pi / 100.0).powi(2) + p.nu_n * pi * pi;
        let tau = steady_state_linear(
            &p,
            &s,
            &SolverOptions {
                tolerance: 1e-13,
                ..opts
            },
        )
        .unwrap();
        tau.max_abs_diff(&s.scaled(1.0 / denom))
    };
    let errors: Vec<f64> = [(9, 5), (17, 9), (33, 17), (65, 33)]
        .iter()
        .map(|&(n, m)| mode_error(n, m))
        .collect();
    let order = errors
        .windows(2)
        .map(|w| (w[0] / w[1]).log2())
        .fold(f64::INFINITY, f64::min);

    let secs = start.elapsed().as_secs_f64();
    let ok = green < 0.02 && flat <= 1e-10 && order >= 1.8 && secs <= 60.0;
    v.record(
        4,
        ok,
        format!(
            "green rel err {green:.2e}, uniform err {flat:.1e}, min order {order:.3}, {secs:.1} s"
        ),
        &[],
    );
}

fn fk_cross_oracle(v: &mut Verdicts) {
    let start = Instant::now();
    let pi = std::f64::consts::PI;
    let p = StructuralParams::new(100.0, 0.015, 0.25, 0.0);
    let d = SpatialDomain {
        grid: [201, 1, 21],
        ..SpatialDomain::default()
    };
    let source = move |x: f64, a: f64| 0.1 * (pi * x / 100.0).cos() * (1.0 + 0.3 * (pi * a).cos());
    let field = GridField::from_fn(d, |x, _, a| source(x, a));
    let zero = GridField::zeros(d);
    let times = [0.5, 1.0, 2.0, 4.0];

    // Backward Euler at two steps, Richardson-extrapolated to second order.
    let run = |dt: f64| {
        let every = (0.5 / dt).round() as usize;
        let out = transient(
            &p,
            &zero,
            TimeSource::Constant(&field),
            dt,
            4.0,
            &SolverOptions::default(),
            every,
        )
        .unwrap();
        times.map(|t| {
            out.iter()
                .find(|(s, _)| (s - t).abs() < 1e-9)
                .unwrap()
                .1
                .clone()
        })
    };
    let (coarse, fine) = (run(0.01), run(0.005));
    let pde: Vec<GridField> = coarse
        .iter()
        .zip(&fine)
        .map(|(c, f)| f.scaled(2.0).plus(&c.scaled(-1.0)))
        .collect();

    let points = [(20usize, 4usize), (60, 16), (90, 10), (120, 2), (170, 13)];
    let fk_source = move |x: [f64; 3], _: f64| source(x[0], x[2]);
    let mut worst = 0.0f64;
    let mut misses = Vec::new();
    for (pi_, &(i, k)) in points.iter().enumerate() {
        for (ti, &t) in times.iter().enumerate() {
            let at = [d.node(0, i), 50.0, d.node(2, k)];
            let spec = PathSpec::new(at, t, 0.005, 10_000, d);
            let e = fk_effect(
                &p,
                &fk_source,
                None,
                &spec,
                SeedSpec::new(5).child("pair", (pi_ * 4 + ti) as u64),
            )
            .unwrap();
            let z = (e.estimate - pde[ti].at(i, 0, k)).abs() / e.path_se;
            worst = worst.max(z);
            if z > 3.0 {
                misses.push(format!(
                    "x1 {} alpha {} t {t}: fk {:.5} pde {:.5} z {z:.2}",
                    at[0],
                    at[2],
                    e.estimate,
                    pde[ti].at(i, 0, k)
                ));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    v.record(
        5,
        misses.is_empty() && secs <= 300.0,
        format!("20 pairs, worst |fk - pde| = {worst:.2} path_se, {secs:.1} s"),
        &misses,
    );
}

fn closed_forms(v: &mut Verdicts) {
    let mut worst = 0.0f64;
    let mut check = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for &(ns, nn, k, l) in &[
        (0.0, 0.0, 0.25, 0.0),
        (100.0, 0.0, 0.25, 0.0),
        (0.0, 0.015, 0.25, 0.0),
        (100.0, 0.015, 0.25, 0.04),
        (3.5, 0.7, 1.3, -0.9),
    ] {
        let p = StructuralParams::new(ns, nn, k, l);
        let nu: f64 = ns + nn;
        let expected = if nu == 0.0 {
            1.0
        } else {
            (k * nu + nu * nu + l * l) / (k * nu)
        };
        // relative: the full-model factor is about 400
        check(amplification_factor(&p) / expected, 1.0);
    }
    for &k in &[0.05, 0.25, 0.3, 1.0, 2.5] {
        for &dt in &[0.1, 0.25, 0.35] {
            let (rho, beta) = ar1_from_structural(k, dt).unwrap();
            check(rho, 1.0 - k * dt);
            check(beta, dt);
            check(structural_from_ar1(rho, dt).unwrap(), k);
            check(half_life(k).unwrap(), 2.0f64.ln() / k);
            let (speed, long_run, impact) = ecm_from_structural(k, dt).unwrap();
            check(speed, k * dt);
            check(long_run * k, 1.0);
            check(impact, dt);
            for &ns in &[0.0, 12.0, 100.0] {
                for &dx in &[5.0, 30.0, 200.0] {
                    let rho = sar_from_structural(ns, k, dx, 4.0).unwrap();
                    check(rho, 4.0 * ns / (k * dx * dx));
                    check(
                        structural_from_sar(rho, k, dx, 4.0).unwrap() / ns.max(1.0),
                        ns / ns.max(1.0),
                    );
                }
            }
            for &nn in &[0.0, 0.015, 0.48] {
                let (b, g) = network_te_coefficients(nn, k).unwrap();
                check(b * k, 1.0);
                check(g, nn / k);
            }
            if k * dt < 1.0 {
                let c = predicted_event_study(0.7, k, dt, 3, 8).unwrap();
                check(c.len() as f64, 12.0);
                for (j, x) in c.iter().enumerate() {
                    let e = if j < 3 {
                        0.0
                    } else {
                        0.7 * ((j - 3) as f64 * (1.0 - k * dt).ln()).exp()
                    };
                    check(*x, e);
                }
                // Geometric decay inverts back to the structural rate.
                check(structural_from_ar1(c[4] / c[3], dt).unwrap(), k);
            }
        }
    }
    v.record(
        6,
        worst <= 1e-10,
        format!("closed forms and round trips, max abs deviation {worst:.1e}"),
        &[],
    );
}

fn sensitivities(v: &mut Verdicts) {
    let constant = |_: [f64; 3], _: f64| 0.1;
    let border = |p: [f64; 3], _: f64| {
        if p[0] > 50.0 {
            0.1 * (1.0 + 0.3 * p[2])
        } else {
            0.0
        }
    };
    let d = SpatialDomain::default();

    let p2 = config_params(ConfigId::SpatialOnly);
    let spec = PathSpec::new([45.0, 50.0, 0.5], 4.0, 0.01, 2000, d);
    let an = sensitivity_kappa(&p2, &constant, &spec, SeedSpec::new(71))
        .unwrap()
        .estimate;
    let (fd, _, _) = sensitivity_fd(&p2, &constant, &spec, SeedSpec::new(71), 2, 1e-3).unwrap();
    let r1 = (fd / an - 1.0).abs();

    let p4 = config_params(ConfigId::FullModel);
    let spec = PathSpec::new([48.0, 50.0, 0.5], 8.0, 0.02, 4000, d);
    let an4 = sensitivity_kappa(&p4, &border, &spec, SeedSpec::new(72))
        .unwrap()
        .estimate;
    let (fd4, _, _) = sensitivity_fd(&p4, &border, &spec, SeedSpec::new(72), 2, 1e-3).unwrap();
    let r4 = (fd4 / an4 - 1.0).abs();

    v.record(
        7,
        r1 <= 0.01 && r4 <= 0.05,
        format!("d tau / d kappa, constant source rel diff {r1:.2e} (analytic {an:.5}), full-model border {r4:.2e} (analytic {an4:.5})"),
        &[],
    );
}

fn mutual_information_checks(v: &mut Verdicts) {
    let start = Instant::now();
    let n = 5000;
    let rho = 0.5f64;
    let mut rng = SeedSpec::new(81).rng("gaussian", 0);
    let mut coords = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    for _ in 0..n {
        let [a, b, c]: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(&mut rng));
        coords.push([a, c]);
        alphas.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    let truth = -0.5 * (1.0 - rho * rho).ln();
    let gauss = mutual_information(&coords, &alphas, 3).unwrap();

    let s = DgpSettings {
        n_units: n,
        ..DgpSettings::default()
    };
    let (c, a) = make_geography(&s, &mut SeedSpec::new(82).rng("uniform", 0));
    let indep = mutual_information(&c, &a, 3).unwrap();
    let secs = start.elapsed().as_secs_f64();
    v.record(
        8,
        (gauss - truth).abs() <= 0.02 && indep.abs() <= 0.02 && secs <= 30.0,
        format!("gaussian {gauss:.4} vs {truth:.4}, independent {indep:+.4}, {secs:.1} s"),
        &[],
    );
}

fn event_study(v: &mut Verdicts) {
    let base = SeedSpec::new(McPlan::default().base_seed);
    let a = event_study_panel(
        &PanelDesign::no_spillovers(),
        200,
        base.child("event_study", 0),
    )
    .unwrap();
    let b = event_study_panel(
        &PanelDesign::with_spillovers(),
        50,
        base.child("event_study", 1),
    )
    .unwrap();
    let kappa = a.mean_decay_kappa();
    let twfe = PanelPaths::plateau(&b.twfe, 3);
    let full = PanelPaths::plateau(&b.full_pde, 3);
    let ok = (kappa / 0.3 - 1.0).abs() <= 0.1 && twfe <= 0.8 * full;
    v.record(
        9,
        ok,
        format!(
            "decay kappa {kappa:.4} over {} reps, spillover panel plateaus twfe {twfe:.3} vs full pde {full:.3} ({:.0}% below)",
            a.decay_kappa.len(),
            100.0 * (1.0 - twfe / full)
        ),
        &[],
    );
}

fn uncertainty(v: &mut Verdicts) {
    let settings = DgpSettings::default();
    let sim = simulate_dataset(ConfigId::FullModel, &settings, 1).unwrap();
    let opts = EstimatorOptions::default();
    let report = full_gmm(
        &sim.dataset,
        &opts.hac,
        &opts.gmm,
        &EstimatorContext::from_settings(&settings),
    )
    .unwrap();
    let rows = match uncertainty_table(&report, &UncertaintyOptions::default()) {
        Ok(r) => r,
        Err(e) => {
            v.record(10, false, format!("decomposition failed: {e}"), &[]);
            return;
        }
    };
    let shares: Vec<f64> = rows.iter().map(|r| r.parameter_pct).collect();
    let monotone = shares.windows(2).all(|w| w[1] >= w[0]);
    let identity = rows
        .iter()
        .map(|r| (r.total_variance - r.within_model_variance - r.parameter_variance).abs())
        .fold(0.0, f64::max);
    v.record(
        10,
        monotone && identity <= 1e-10,
        format!("parameter shares {shares:.1?} %, identity residual {identity:.1e}"),
        &[],
    );
}

fn spillover_size_and_power(v: &mut Verdicts) {
    let start = Instant::now();
    let settings = DgpSettings::default();
    let plan = McPlan::default();
    let hac = EstimatorOptions::default().hac;
    let mut rates = BTreeMap::new();
    for c in [ConfigId::NoSpillovers, ConfigId::FullModel] {
        let field = treatment_field(c, &settings).unwrap();
        let mut rejected = 0usize;
        for r in 0..500 {
            let seed = SeedSpec::new(plan.replication_seed(c, r))
                .child("spillover_test", 0)
                .base_seed;
            let sim = simulate_dataset_with_field(c, &settings, seed, &field).unwrap();
            let t = spillover_test(&sim.dataset, &default_transform, &hac).unwrap();
            rejected += t.rejects(0.05) as usize;
        }
        rates.insert(c, rejected as f64 / 500.0);
    }
    let (size, power) = (rates[&ConfigId::NoSpillovers], rates[&ConfigId::FullModel]);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    v.record(
        11,
        in_range(size, 0.02, 0.09) && power >= 0.8 && minutes <= 30.0,
        format!(
            "rejection at 5%: no_spillovers {size:.3}, full_model {power:.3}, {minutes:.1} min"
        ),
        &[],
    );
}

fn spnet(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_spnet"))
        .args(args)
        .stdout(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn output_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().into_owned();
        if e.path().is_dir() {
            for (k, v) in output_files(&e.path()) {
                out.insert(format!("{name}/{k}"), v);
            }
        } else if name != "metadata.json" {
            out.insert(name, std::fs::read(e.path()).unwrap());
        }
    }
    out
}

fn determinism(v: &mut Verdicts) {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let config = root.join("small.toml");
    std::fs::write(
        &config,
        "[mc]\nconfigs = [\"no_spillovers\", \"full_model\"]\nreplications = 2\nevent_study_replications = [3, 2]\n\n\
         [fk]\ndraws = 6\npaths = 40\n",
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for cmd in ["simulate", "mc", "fk"] {
        let dirs: Vec<_> = ["1", "2", "again"]
            .iter()
            .map(|p| root.join(format!("{cmd}-{p}")))
            .collect();
        let mut ran = true;
        for (dir, par) in dirs.iter().zip(["1", "2", "1"]) {
            ran &= spnet(&[
                cmd,
                "--config",
                cfg,
                "--out",
                dir.to_str().unwrap(),
                "--parallelism",
                par,
            ]);
        }
        let same = ran && {
            let first = output_files(&dirs[0]);
            !first.is_empty() && dirs[1..].iter().all(|d| output_files(d) == first)
        };
        ok &= same;
        details.push(format!(
            "{cmd:<8} parallelism 1 vs 2 and rerun: {}",
            if same { "identical" } else { "DIFFERENT" }
        ));
    }
    let data = root.join("simulate-1");
    let reports: Vec<_> = (0..2)
        .map(|k| root.join(format!("estimate-{k}.json")))
        .collect();
    let ran = reports.iter().all(|r| {
        spnet(&[
            "estimate",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg,
            "--spillover-test",
            "--out",
            r.to_str().unwrap(),
        ])
    });
    let same = ran && std::fs::read(&reports[0]).unwrap() == std::fs::read(&reports[1]).unwrap();
    ok &= same;
    details.push(format!(
        "estimate rerun: {}",
        if same { "identical" } else { "DIFFERENT" }
    ));
    v.record(
        12,
        ok,
        "byte-identical outputs excluding metadata.json".into(),
        &details,
    );
}

#[test]
fn acceptance_criteria() {
    let mut v = Verdicts(Vec::new());
    say("");
    say("acceptance criteria");

    let start = Instant::now();
    let records = run_mc(&McPlan::default()).expect("monte carlo sweep");
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let cells = summarize(&records).expect("summary");
    bias_table(&mut v, &cells, minutes);
    coverage_table(&mut v, &cells);
    risk_profile(&mut v, &cells);

    pde_oracles(&mut v);
    fk_cross_oracle(&mut v);
    closed_forms(&mut v);
    sensitivities(&mut v);
    mutual_information_checks(&mut v);
    event_study(&mut v);
    uncertainty(&mut v);
    spillover_size_and_power(&mut v);
    determinism(&mut v);

    let failed: Vec<usize> = v.0.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    say(&format!(
        "acceptance: {} of {} criteria pass, failing {failed:?}",
        v.0.len() - failed.len(),
        v.0.len()
    ));
    if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|s| s == "1") {
        assert!(failed.is_empty(), "failing criteria {failed:?}");
    }
}
