use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use spnet_core::dgp::{make_geography, simulate_dataset, source_value, DgpSettings, Geography};
use spnet_core::estimators::*;
use spnet_core::mc::{run_estimator, EstimatorOptions, ESTIMATORS};
use spnet_core::pde::predicted_event_study;
use spnet_core::seed::SeedSpec;
use spnet_core::{config_params, Adjacency, ConfigId, Dataset, UnitRecord};

fn ctx() -> EstimatorContext {
    EstimatorContext::default()
}

/// Uniform economy with the standard exposure rule, Gaussian controls, no
/// networks and an outcome given by `y(unit, rng)`.
fn synthetic(
    n: usize,
    seed: u64,
    y: impl Fn(&UnitRecord, &mut dyn rand::RngCore) -> f64,
) -> Dataset {
    let mut rng = SeedSpec::new(seed).rng("synthetic", 0);
    let mut units = Vec::with_capacity(n);
    for i in 0..n {
        let x = [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)];
        let alpha: f64 = rng.random();
        let controls = [0, 1, 2].map(|_| StandardNormal.sample(&mut rng));
        let mut u = UnitRecord {
            id: i as u32,
            x,
            alpha,
            source: source_value(x[0], alpha, 0.1, 50.0),
            controls,
            outcome: 0.0,
            degree: 0,
        };
        u.outcome = y(&u, &mut rng);
        units.push(u);
    }
    Dataset {
        units,
        network: Adjacency::empty(n),
        lagged_network: Adjacency::empty(n),
        config_id: None,
        seed: None,
    }
}

fn random_graph(n: usize, mean_degree: f64, seed: u64) -> Adjacency {
    let mut rng = SeedSpec::new(seed).rng("graph", 0);
    let p = mean_degree / (n - 1) as f64;
    let mut edges = Vec::new();
    for i in 0..n as u32 {
        for j in i + 1..n as u32 {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Adjacency::from_edges(n, &edges).unwrap()
}

fn noise(rng: &mut dyn rand::RngCore) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    0.05 * z
}

#[test]
fn twfe_without_exposure_finds_nothing() {
    let mut ds = synthetic(400, 1, |u, r| 0.1 * u.controls[0] + noise(r));
    for u in &mut ds.units {
        u.source = 0.0;
    }
    let rep = twfe(&ds, 20, &ctx()).unwrap();
    assert!(
        rep.direct.estimate.abs() <= 3.0 * rep.direct.se || rep.direct.estimate == 0.0,
        "{:?}",
        rep.direct
    );
    assert!(
        rep.warnings
            .iter()
            .any(|w| w.contains("dropped collinear regressor S")),
        "{:?}",
        rep.warnings
    );
}

#[test]
fn twfe_rejects_a_single_bin() {
    let ds = synthetic(100, 1, |_, r| noise(r));
    assert!(twfe(&ds, 1, &ctx()).is_err());
}

#[test]
fn did_on_a_constant_outcome_is_exactly_zero() {
    let ds = synthetic(400, 2, |_, _| 3.25);
    let rep = did(&ds, &ctx()).unwrap();
    assert_eq!(rep.direct.estimate, 0.0);
    assert_eq!(rep.total_border.estimate, 0.0);
}

#[test]
fn did_without_controls_side_fails() {
    let mut ds = synthetic(200, 2, |_, r| noise(r));
    for u in &mut ds.units {
        u.x[0] = 60.0 + u.x[0] / 4.0;
    }
    assert!(did(&ds, &ctx()).is_err());
}

#[test]
fn gps_recovers_a_noiseless_linear_dose_response() {
    let ds = synthetic(500, 3, |u, _| 0.1 * u.source);
    let rep = gps(&ds, None, &ctx()).unwrap();
    let slope = rep.direct.estimate / ctx().effect_scale;
    assert!((slope - 0.1).abs() < 1e-6, "slope {slope}");
}

#[test]
fn gps_needs_exposure() {
    let mut ds = synthetic(300, 3, |_, r| noise(r));
    for u in &mut ds.units {
        u.source = 0.0;
    }
    assert!(gps(&ds, None, &ctx()).is_err());
}

#[test]
fn local_linear_recovers_a_unit_step() {
    let ds = synthetic(600, 4, |u, _| f64::from(u8::from(u.x[0] > 50.0)));
    let x: Vec<f64> = ds.units.iter().map(|u| u.x[0] - 50.0).collect();
    let (jump, _, nl, nr) = local_linear_discontinuity(&x, &ds.outcomes(), 10.0).unwrap();
    assert!((jump - 1.0).abs() < 1e-6, "jump {jump}");
    assert!(nl >= 20 && nr >= 20);
    let rep = spatial_rd(&ds, Some(10.0), &ctx()).unwrap();
    assert!((rep.diagnostics["discontinuity"] - 1.0).abs() < 1e-6);
}

#[test]
fn rd_needs_units_on_both_sides() {
    let ds = synthetic(200, 4, |_, r| noise(r));
    let x: Vec<f64> = ds.units.iter().map(|u| u.x[0] - 50.0).collect();
    assert!(matches!(
        local_linear_discontinuity(&x, &ds.outcomes(), 1.0),
        Err(spnet_core::Error::InsufficientData(_))
    ));
}

/// OLS through the normal equations.
fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    (x.transpose() * x)
        .lu()
        .solve(&(x.transpose() * y))
        .unwrap()
}

#[test]
fn iv_with_an_unchanged_network_is_ols() {
    let g = random_graph(400, 8.0, 5);
    let mut ds = synthetic(400, 5, |u, r| {
        0.4 * u.source + 0.2 * u.controls[1] + noise(r)
    });
    let s = ds.sources();
    let nt = g.spmv(&s);
    for (u, v) in ds.units.iter_mut().zip(&nt) {
        u.outcome += 0.3 * v;
    }
    ds.network = g.clone();
    ds.lagged_network = g;
    let rep = network_iv(&ds, &ctx()).unwrap();
    let n = ds.n();
    let x = DMatrix::from_fn(n, 6, |i, j| match j {
        0 => 1.0,
        1 => s[i],
        2 => nt[i],
        k => ds.units[i].controls[k - 3],
    });
    let b = ols(&x, &DVector::from_vec(ds.outcomes()));
    for (name, j) in [("S", 1), ("N_tilde", 2), ("X2", 4)] {
        let c = rep.coefficient(name).unwrap().estimate;
        assert!((c - b[j]).abs() < 1e-8, "{name}: {c} vs {}", b[j]);
    }
}

#[test]
fn iv_requires_a_lagged_network() {
    let mut ds = synthetic(100, 5, |_, r| noise(r));
    ds.lagged_network = Adjacency::empty(0);
    assert!(network_iv(&ds, &ctx()).is_err());
}

fn line_coords(n: usize, len: f64, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = SeedSpec::new(seed).rng("line", 0);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..len)).collect();
    x.sort_by(f64::total_cmp);
    x.into_iter().map(|v| [v, 0.0]).collect()
}

/// Every pair listed at one hop, so only the spatial kernel matters once the
/// network bandwidth is huge.
fn all_pairs(n: usize) -> Vec<Vec<(u32, u32)>> {
    (0..n)
        .map(|i| {
            (0..n as u32)
                .map(|j| (j, u32::from(j as usize != i)))
                .collect()
        })
        .collect()
}

#[test]
fn hac_with_vanishing_bandwidths_is_white() {
    let n = 300;
    let coords = line_coords(n, 100.0, 6);
    let mut rng = SeedSpec::new(6).rng("m", 0);
    let m = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
    let g = random_graph(n, 6.0, 6);
    let spec = HacSpec {
        spatial_bandwidth: 1e-9,
        network_bandwidth: 1e-9,
    };
    let hac = hac_cov(&m, &coords, &network_distances(&g, spec.max_hops()), &spec);
    let white = m.transpose() * &m;
    assert!((hac - &white).amax() < 1e-10 * white.amax());
}

#[test]
fn hac_of_independent_moments_matches_the_iid_covariance() {
    let n = 2000;
    let mut rng = SeedSpec::new(7).rng("iid", 0);
    let coords: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)])
        .collect();
    let m = DMatrix::from_fn(n, 1, |_, _| StandardNormal.sample(&mut rng));
    let g = random_graph(n, 10.0, 7);
    let spec = HacSpec::default();
    let v = hac_cov(&m, &coords, &network_distances(&g, spec.max_hops()), &spec)[(0, 0)] / n as f64;
    assert!((v - 1.0).abs() < 0.1, "{v}");
}

#[test]
fn hac_tracks_an_exponential_covariogram() {
    let (n, ell, reps) = (1000, 2.0, 40);
    let coords = line_coords(n, 1000.0, 8);
    let analytic: f64 = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (-(coords[i][0] - coords[j][0]).abs() / ell).exp())
                .sum::<f64>()
        })
        .sum();
    let hops = all_pairs(n);
    let spec = HacSpec {
        spatial_bandwidth: 30.0,
        network_bandwidth: 1e12,
    };
    let mut rng = SeedSpec::new(8).rng("field", 0);
    let mut mean_hac = 0.0;
    for _ in 0..reps {
        // Ornstein–Uhlenbeck along the sorted line has exactly this covariogram.
        let mut m = DMatrix::<f64>::zeros(n, 1);
        m[(0, 0)] = StandardNormal.sample(&mut rng);
        for i in 1..n {
            let r = (-(coords[i][0] - coords[i - 1][0]) / ell).exp();
            let z: f64 = StandardNormal.sample(&mut rng);
            m[(i, 0)] = r * m[(i - 1, 0)] + (1.0 - r * r).sqrt() * z;
        }
        mean_hac += hac_cov(&m, &coords, &hops, &spec)[(0, 0)] / reps as f64;
    }
    assert!(
        (mean_hac / analytic - 1.0).abs() < 0.2,
        "hac {mean_hac} analytic {analytic}"
    );
}

fn spillover_data(seed: u64) -> Dataset {
    let g = random_graph(400, 8.0, seed);
    let mut ds = synthetic(400, seed, |u, r| {
        0.4 * u.source + 0.1 * u.controls[0] + noise(r)
    });
    ds.network = g.clone();
    ds.lagged_network = g;
    ds
}

#[test]
fn spillover_statistic_ignores_affine_control_changes() {
    let ds = spillover_data(9);
    let base = spillover_test(&ds, &default_transform, &HacSpec::default()).unwrap();
    let mut moved = ds.clone();
    for u in &mut moved.units {
        u.controls = [
            3.0 * u.controls[0] - 1.0,
            0.5 * u.controls[1] + 7.0,
            -2.0 * u.controls[2],
        ];
    }
    let t = spillover_test(&moved, &default_transform, &HacSpec::default()).unwrap();
    assert_eq!(base.dof, 3);
    assert!(
        (t.statistic - base.statistic).abs() < 1e-8 * base.statistic.max(1.0),
        "{} vs {}",
        t.statistic,
        base.statistic
    );
}

#[test]
fn spillover_test_degrades_on_degenerate_designs() {
    // No network: only the distance term is testable.
    let mut ds = spillover_data(10);
    ds.network = Adjacency::empty(ds.n());
    let t = spillover_test(&ds, &default_transform, &HacSpec::default()).unwrap();
    assert_eq!(t.dof, 1);
    assert_eq!(t.coefficients[0].0, "f_d");
    assert!(t.p_value.is_finite());

    // Everyone exposed as well: nothing left to test.
    for u in &mut ds.units {
        u.source = 0.1 + 0.01 * u.alpha;
    }
    let t = spillover_test(&ds, &default_transform, &HacSpec::default()).unwrap();
    assert_eq!(t.dof, 0);
    assert_eq!(t.dropped.len(), 3);
    assert!(t.statistic.is_nan());
}

fn gaussian_pairs(n: usize, rho: f64, seed: u64) -> (Vec<[f64; 2]>, Vec<f64>) {
    let mut rng = SeedSpec::new(seed).rng("gauss", 0);
    let mut coords = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    for _ in 0..n {
        let [a, b, c]: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(&mut rng));
        coords.push([a, c]);
        alphas.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    (coords, alphas)
}

#[test]
fn mi_of_a_correlated_gaussian_pair() {
    let (c, a) = gaussian_pairs(5000, 0.5, 11);
    let truth = -0.5 * (1.0f64 - 0.25).ln();
    let mi = mutual_information(&c, &a, 3).unwrap();
    assert!((mi - truth).abs() < 0.02, "{mi} vs {truth}");
}

#[test]
fn mi_of_independent_uniforms_is_near_zero() {
    let s = DgpSettings {
        n_units: 5000,
        ..DgpSettings::default()
    };
    let (c, a) = make_geography(&s, &mut SeedSpec::new(12).rng("g", 0));
    let mi = mutual_information(&c, &a, 3).unwrap();
    assert!(mi.abs() <= 0.02, "{mi}");
}

#[test]
fn mi_of_a_clustered_economy_is_near_the_mixed_effect() {
    let s = DgpSettings {
        geography: Geography::Clustered {
            centers: 20,
            spread: 20.0,
            alpha_spread: 0.3,
        },
        ..DgpSettings::default()
    };
    let est: Vec<f64> = (0..20)
        .map(|k| {
            let (c, a) = make_geography(&s, &mut SeedSpec::new(k).rng("g", 0));
            mutual_information(&c, &a, 3).unwrap()
        })
        .collect();
    let mean = est.iter().sum::<f64>() / est.len() as f64;
    assert!((mean - 0.04).abs() <= 0.02, "{mean} from {est:?}");
}

#[test]
fn mi_needs_fifty_points() {
    let (c, a) = gaussian_pairs(40, 0.5, 13);
    assert!(mutual_information(&c, &a, 3).is_err());
}

#[test]
fn decay_test_on_an_exact_geometric_sequence() {
    let coeffs: Vec<(f64, f64)> = (0..6).map(|k| (0.7f64.powi(k), 0.01)).collect();
    let t = event_study_decay_test(&coeffs, 1.0).unwrap();
    assert!((t.kappa_hat + 0.7f64.ln()).abs() < 1e-12);
    assert!(t.statistic < 1e-20);
    assert!(t.joint_p > 1.0 - 1e-9);
}

#[test]
fn decay_test_inverts_the_predicted_event_study() {
    let path = predicted_event_study(1.0, 0.3, 1.0, 3, 8).unwrap();
    let coeffs: Vec<(f64, f64)> = path[3..].iter().map(|&b| (b, 0.02)).collect();
    let t = event_study_decay_test(&coeffs, 1.0).unwrap();
    assert!(
        (t.kappa_discrete - 0.3).abs() < 1e-10,
        "{}",
        t.kappa_discrete
    );
}

#[test]
fn decay_test_flags_sign_changes() {
    let t = event_study_decay_test(&[(1.0, 0.1), (-0.5, 0.1), (0.2, 0.1)], 1.0).unwrap();
    assert!(!t.applicable && t.kappa_hat.is_nan());
    assert!(event_study_decay_test(&[(1.0, 0.1), (0.5, 0.1)], 1.0).is_err());
}

#[test]
fn gmm_recovers_parameters_from_noiseless_outcomes() {
    let settings = DgpSettings {
        outcome_noise_sd: 1e-6,
        ..DgpSettings::default()
    };
    let c = EstimatorContext::from_settings(&settings);
    let (hac, opts) = (HacSpec::default(), GmmOptions::default());
    for id in [ConfigId::NoSpillovers, ConfigId::FullModel] {
        let sim = simulate_dataset(id, &settings, 3).unwrap();
        let rep = full_gmm(&sim.dataset, &hac, &opts, &c).unwrap();
        let truth = config_params(id);
        let th = rep.structural.as_ref().unwrap().params;
        assert!(
            (th.kappa / truth.kappa - 1.0).abs() < 1e-3,
            "{id:?} kappa {}",
            th.kappa
        );
        assert!(
            (th.nu_s - truth.nu_s).abs() < 0.01 * truth.nu_s.max(1.0),
            "{id:?} nu_s {}",
            th.nu_s
        );
        assert!(
            (th.nu_n - truth.nu_n).abs() < 1e-3,
            "{id:?} nu_n {}",
            th.nu_n
        );
        assert!((rep.direct.estimate - 0.1).abs() < 1e-5);
        let j = rep.test("hansen_j").unwrap();
        assert_eq!(j.dof, 4.0);
        assert!(j.p_value > 0.5, "{id:?} J {}", j.statistic);

        let p = GmmProblem::new(&sim.dataset, &hac, &opts, &c).unwrap();
        let w = p
            .moment_covariance(&p.moments(&th).unwrap())
            .try_inverse()
            .unwrap();
        assert!(p.objective(&th, &w).unwrap() <= p.objective(&truth, &w).unwrap());
    }
}

#[test]
fn every_interval_is_estimate_plus_minus_196_se() {
    let settings = DgpSettings::default();
    let sim = simulate_dataset(ConfigId::FullModel, &settings, 14).unwrap();
    let c = EstimatorContext::from_settings(&settings);
    for name in ESTIMATORS {
        let rep = run_estimator(name, &sim.dataset, &EstimatorOptions::default(), &c).unwrap();
        for e in [rep.direct, rep.total_border] {
            assert!(e.se >= 0.0, "{name}");
            assert_eq!(e.ci_lower, e.estimate - 1.96 * e.se, "{name}");
            assert_eq!(e.ci_upper, e.estimate + 1.96 * e.se, "{name}");
        }
        assert!(rep.coefficients.iter().all(|k| k.se >= 0.0), "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hac_is_symmetric_psd(seed in 0u64..1000, sb in 0.5f64..50.0, nb in 0.5f64..4.0) {
        let n = 80;
        let mut rng = SeedSpec::new(seed).rng("prop", 0);
        let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
        let m = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let spec = HacSpec { spatial_bandwidth: sb, network_bandwidth: nb };
        let g = random_graph(n, 5.0, seed);
        let v = hac_cov(&m, &coords, &network_distances(&g, spec.max_hops()), &spec);
        prop_assert!((&v - v.transpose()).amax() <= 1e-12 * v.amax());
        let eig = nalgebra::SymmetricEigen::new(v.clone()).eigenvalues;
        prop_assert!(eig.iter().all(|&l| l >= -1e-10 * v.amax()));
    }

    #[test]
    fn intervals_are_symmetric(est in -10.0f64..10.0, se in 0.0f64..5.0) {
        let e = Estimate::new(est, se);
        prop_assert!(((e.ci_upper - e.estimate) - 1.96 * se).abs() <= 1e-12 * (1.0 + est.abs()));
        prop_assert!(((e.estimate - e.ci_lower) - 1.96 * se).abs() <= 1e-12 * (1.0 + est.abs()));
        prop_assert!(e.covers(est));
    }
}
