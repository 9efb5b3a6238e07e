use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use spnet_core::estimators::{Estimate, EstimateReport, StructuralEstimate};
use spnet_core::mc::*;
use spnet_core::seed::SeedSpec;
use spnet_core::{config_params, ConfigId, SpatialDomain};

fn cheap_plan(replications: usize, parallelism: usize) -> McPlan {
    McPlan {
        configs: vec![ConfigId::NoSpillovers, ConfigId::SpatialOnly],
        estimators: vec!["twfe".into(), "did".into(), "spatial_rd".into()],
        replications,
        parallelism,
        ..McPlan::default()
    }
}

#[test]
fn sweeps_are_reproducible_and_thread_count_free() {
    let a = run_mc(&cheap_plan(2, 1)).unwrap();
    let b = run_mc(&cheap_plan(2, 2)).unwrap();
    assert_eq!(a.len(), 2 * 2 * 3);
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_records(&pa, &a).unwrap();
    write_records(&pb, &run_mc(&cheap_plan(2, 1)).unwrap()).unwrap();
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
}

#[test]
fn smoke_plan_gives_two_records_per_cell() {
    let cells = summarize(&run_mc(&cheap_plan(2, 0)).unwrap()).unwrap();
    assert_eq!(cells.len(), 2 * 3 * 2);
    for c in &cells {
        assert_eq!(c.replications, 2, "{} {}", c.config.as_str(), c.estimator);
        assert!(!c.unreliable);
    }
}

#[test]
fn resumed_sweeps_skip_finished_replications() {
    let plan = cheap_plan(2, 1);
    let full = run_mc(&plan).unwrap();
    let done: std::collections::BTreeSet<_> =
        [(ConfigId::NoSpillovers, 0usize), (ConfigId::SpatialOnly, 1)].into();
    let flushed = std::sync::Mutex::new(0usize);
    let rest = run_mc_resumable(&plan, &done, &|r: &[McRecord]| {
        *flushed.lock().unwrap() += r.len()
    })
    .unwrap();
    assert_eq!(rest.len(), 2 * 3);
    assert_eq!(*flushed.lock().unwrap(), rest.len());
    assert!(rest.iter().all(|r| full.contains(r)));
}

#[test]
fn unknown_estimators_are_rejected_up_front() {
    let plan = McPlan {
        estimators: vec!["ols".into()],
        ..McPlan::default()
    };
    assert!(plan.validate().is_err());
    assert!(run_mc(&plan).is_err());
}

fn record(rep: usize, est: f64, se: f64, truth: f64) -> McRecord {
    McRecord {
        config: ConfigId::FullModel,
        replication: rep,
        seed: rep as u64,
        estimator: "gps".into(),
        truth_direct: truth,
        truth_total: truth,
        direct: est,
        direct_se: se,
        total: est,
        total_se: se,
        error: String::new(),
    }
}

#[test]
fn calibrated_normal_estimator_covers_at_the_nominal_rate() {
    let noise = Normal::new(0.0, 0.018).unwrap();
    let mut rng = SeedSpec::new(1).rng("synthetic", 0);
    let recs: Vec<McRecord> = (0..1000)
        .map(|r| record(r, 0.1 + noise.sample(&mut rng), 0.018, 0.1))
        .collect();
    let cell = summarize(&recs)
        .unwrap()
        .into_iter()
        .find(|c| c.target == Target::Direct)
        .unwrap();
    assert!((cell.coverage - 0.95).abs() <= 0.02, "{}", cell.coverage);
    assert!(cell.bias.abs() < 3.0 * cell.bias_mc_se);
}

#[test]
fn a_fifth_failing_is_reliable_but_more_is_not() {
    let mut recs: Vec<McRecord> = (0..10).map(|r| record(r, 0.1, 0.01, 0.1)).collect();
    for r in recs.iter_mut().take(2) {
        r.error = "numerical failure".into();
        r.direct = f64::NAN;
        r.total = f64::NAN;
    }
    let cell = find_cell(
        &summarize(&recs).unwrap(),
        ConfigId::FullModel,
        "gps",
        Target::Direct,
    )
    .unwrap()
    .clone();
    assert_eq!((cell.replications, cell.failures), (10, 2));
    assert!(!cell.unreliable);
    recs[2].direct = f64::INFINITY;
    let cell = find_cell(
        &summarize(&recs).unwrap(),
        ConfigId::FullModel,
        "gps",
        Target::Direct,
    )
    .unwrap()
    .clone();
    assert!(cell.unreliable);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mse_splits_into_bias_and_variance(errors in prop::collection::vec(-1.0f64..1.0, 1..60)) {
        let n = errors.len();
        let s = summarize_cell(&errors, &vec![0.1; n], &vec![true; n], &vec![0.0; n], 0);
        prop_assert!((s.rmse.powi(2) - (s.bias.powi(2) + s.variance)).abs() < 1e-12);
    }

    #[test]
    fn summaries_ignore_record_order(seed in 0u64..1000) {
        let noise = Normal::new(0.0, 0.02).unwrap();
        let mut rng = SeedSpec::new(seed).rng("order", 0);
        let mut recs: Vec<McRecord> = (0..40).map(|r| record(r, 0.1 + noise.sample(&mut rng), 0.02, 0.1)).collect();
        let a = summarize(&recs).unwrap();
        recs.shuffle(&mut rng);
        prop_assert_eq!(summarize(&recs).unwrap(), a);
    }
}

#[test]
fn no_spillover_panel_tracks_the_exact_path() {
    let d = PanelDesign::no_spillovers();
    let p = event_study_panel(&d, 8, SeedSpec::new(2)).unwrap();
    assert_eq!(p.failures, 0);
    // Backward Euler with `substeps` steps per period, and its continuous limit.
    let h = 1.0 / d.substeps as f64;
    for (k, t) in p.relative_time.iter().zip(&p.truth) {
        let steps = (*k).max(0) as i32 * d.substeps as i32;
        let discrete = (1.0 - (1.0 + 0.3 * h).powi(-steps)) / 0.3;
        let exact = (1.0 - (-0.3 * (*k).max(0) as f64).exp()) / 0.3;
        assert!((t - discrete).abs() < 1e-9, "k = {k}: {t} vs {discrete}");
        assert!(
            (t - exact).abs() < 0.01 * exact.max(1.0),
            "k = {k}: {t} vs {exact}"
        );
    }
    for (name, path) in p.series() {
        for (k, v) in p.relative_time.iter().zip(path) {
            if *k < 0 {
                assert!(v.abs() < 0.05, "{name} at {k}: {v}");
            }
        }
    }
    assert_eq!(event_study_panel(&d, 8, SeedSpec::new(2)).unwrap(), p);
}

fn posterior_report(cov: [[f64; 4]; 4]) -> EstimateReport {
    let params = config_params(ConfigId::FullModel);
    let none = Estimate::new(f64::NAN, f64::NAN);
    EstimateReport {
        estimator: "full_gmm".into(),
        direct: none,
        total_border: none,
        structural: Some(StructuralEstimate {
            params,
            se: [0, 1, 2, 3].map(|i| cov[i][i].sqrt()),
            cov,
        }),
        coefficients: Vec::new(),
        covariance: Vec::new(),
        tests: Vec::new(),
        diagnostics: Default::default(),
        warnings: Vec::new(),
        effect_scale: 0.025,
    }
}

fn small_uncertainty() -> UncertaintyOptions {
    UncertaintyOptions {
        draws: 8,
        paths: 40,
        horizon: 10.0,
        dt: 0.25,
        domain: SpatialDomain {
            x1_range: [0.0, 200.0],
            ..SpatialDomain::default()
        },
        ..UncertaintyOptions::default()
    }
}

#[test]
fn degenerate_posterior_has_no_parameter_share() {
    let rows = uncertainty_table(&posterior_report([[0.0; 4]; 4]), &small_uncertainty()).unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert_eq!(r.parameter_variance, 0.0);
        assert_eq!(r.parameter_pct, 0.0);
        assert!((r.within_model_pct - 100.0).abs() < 1e-12);
    }
}

#[test]
fn uncertainty_shares_add_up() {
    let mut cov = [[0.0; 4]; 4];
    cov[0][0] = 400.0;
    cov[2][2] = 0.03f64.powi(2);
    let rows = uncertainty_table(&posterior_report(cov), &small_uncertainty()).unwrap();
    for r in rows {
        assert!((r.within_model_pct + r.parameter_pct - 100.0).abs() < 1e-10);
        assert!(
            (r.total_variance - r.within_model_variance - r.parameter_variance).abs()
                <= 1e-10 * r.total_variance
        );
    }
}
