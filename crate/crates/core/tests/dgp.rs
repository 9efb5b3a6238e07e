use proptest::prelude::*;
use rand::Rng;
use spnet_core::dgp::*;
use spnet_core::io::*;
use spnet_core::netgen::*;
use spnet_core::pde::GridField;
use spnet_core::seed::SeedSpec;
use spnet_core::{
    config_params, Adjacency, ConfigId, Dataset, SpatialDomain, StructuralParams, UnitRecord,
    Violation,
};

#[test]
fn configuration_table() {
    let expect = [
        (ConfigId::NoSpillovers, [0.0, 0.0, 0.25, 0.0]),
        (ConfigId::SpatialOnly, [100.0, 0.0, 0.25, 0.0]),
        (ConfigId::NetworkOnly, [0.0, 0.015, 0.25, 0.0]),
        (ConfigId::FullModel, [100.0, 0.015, 0.25, 0.04]),
    ];
    for (id, p) in expect {
        assert_eq!(config_params(id).as_array(), p);
        assert!(config_params(id).is_valid());
    }
}

#[test]
fn parameter_violations() {
    assert!(StructuralParams::new(1.0, 1.0, 0.25, 3.0)
        .validate()
        .contains(&Violation::LambdaExceedsBound));
    assert_eq!(
        Violation::LambdaExceedsBound.to_string(),
        "lambda² > 4·nu_s·nu_n"
    );
    let all = StructuralParams::new(-1.0, -1.0, 0.0, 0.0).validate();
    assert_eq!(
        all,
        vec![
            Violation::NegativeNuS,
            Violation::NegativeNuN,
            Violation::NonPositiveKappa
        ]
    );
    assert_eq!(
        StructuralParams::new(f64::NAN, 0.0, 1.0, 0.0).validate(),
        vec![Violation::NonFinite]
    );
}

fn uniform_units(n: usize, seed: u64) -> (Vec<[f64; 2]>, Vec<f64>) {
    make_geography(
        &DgpSettings {
            n_units: n,
            ..DgpSettings::default()
        },
        &mut SeedSpec::new(seed).rng("geo", 0),
    )
}

#[test]
fn geography_support_and_moments() {
    let (c, a) = uniform_units(500, 1);
    assert!(c
        .iter()
        .all(|x| (0.0..=100.0).contains(&x[0]) && (0.0..=100.0).contains(&x[1])));
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    assert!((mean - 0.5).abs() < 0.05);
    assert_eq!(uniform_units(500, 1), (c.clone(), a));
    assert_ne!(uniform_units(500, 2).0, c);
}

/// Σ_{i<j} p_ij · 2 / N: the degree the generator targets.
fn expected_degree(c: &[[f64; 2]], a: &[f64], g: &GravityParams) -> f64 {
    let n = c.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += g.link_probability(c[i], c[j], a[i], a[j]);
        }
    }
    2.0 * s / n as f64
}

#[test]
fn gravity_degree_matches_its_link_probabilities() {
    let g = GravityParams::default();
    let mut degrees = Vec::new();
    let mut targets = Vec::new();
    for seed in 0..10 {
        let (c, a) = uniform_units(500, seed);
        let adj = generate_network(&c, &a, &g, &mut SeedSpec::new(seed).rng("net", 0)).unwrap();
        assert!(adj.is_symmetric_simple());
        let st = graph_stats(&adj);
        assert!((0.0..=1.0).contains(&st.clustering) && st.degree_cv >= 0.0);
        degrees.push(st.avg_degree);
        targets.push(expected_degree(&c, &a, &g));
    }
    // One graph has ~28000 edges, so a seed's degree has a relative SD near
    // 0.5%; pooled over ten seeds it is below 0.2%.
    for (d, t) in degrees.iter().zip(&targets) {
        assert!((d / t - 1.0).abs() < 0.03, "{d} vs {t}");
    }
    let pooled = degrees.iter().sum::<f64>() / targets.iter().sum::<f64>();
    assert!((pooled - 1.0).abs() < 0.008, "{pooled}");
}

#[test]
fn lag_network_keeps_the_requested_share() {
    let g = GravityParams::default();
    let (c, a) = uniform_units(500, 3);
    let adj = generate_network(&c, &a, &g, &mut SeedSpec::new(3).rng("net", 0)).unwrap();
    let same = lag_network(&adj, &c, &a, &g, 0.0, &mut SeedSpec::new(3).rng("lag", 0)).unwrap();
    assert_eq!(same, adj);

    let lag = lag_network(&adj, &c, &a, &g, 0.2, &mut SeedSpec::new(3).rng("lag", 1)).unwrap();
    assert!(lag.is_symmetric_simple());
    let kept = adj
        .edges()
        .iter()
        .filter(|&&(i, j)| lag.has_edge(i as usize, j as usize))
        .count() as f64;
    // Retention is 0.8 plus the chance 0.2·p of redrawing a dropped edge.
    assert!((kept / adj.n_edges() as f64 - 0.8).abs() < 0.03 + 0.2 * 0.25);
}

#[test]
fn full_rewire_overlaps_like_independent_draws() {
    let g = GravityParams::default();
    let (c, a) = uniform_units(300, 4);
    let n = c.len();
    let mut sum_p2 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum_p2 += g.link_probability(c[i], c[j], a[i], a[j]).powi(2);
        }
    }
    let first = generate_network(&c, &a, &g, &mut SeedSpec::new(4).rng("net", 0)).unwrap();
    let second = generate_network(&c, &a, &g, &mut SeedSpec::new(4).rng("net", 1)).unwrap();
    let lag = lag_network(&first, &c, &a, &g, 1.0, &mut SeedSpec::new(4).rng("lag", 0)).unwrap();
    let overlap = |h: &Adjacency| {
        first
            .edges()
            .iter()
            .filter(|&&(i, j)| h.has_edge(i as usize, j as usize))
            .count() as f64
    };
    let sd = sum_p2.sqrt();
    assert!((overlap(&second) - sum_p2).abs() < 4.0 * sd);
    assert!(
        (overlap(&lag) - sum_p2).abs() < 4.0 * sd,
        "{} vs {sum_p2}",
        overlap(&lag)
    );
}

#[test]
fn no_spillover_truth_is_exposure_over_decay() {
    let s = DgpSettings::default();
    let sim = simulate_dataset(ConfigId::NoSpillovers, &s, 5).unwrap();
    for (u, t) in sim.dataset.units.iter().zip(&sim.tau_true) {
        assert!(
            (t - u.source / 0.25).abs() < 1e-10,
            "unit {} tau {t} source {}",
            u.id,
            u.source
        );
    }
    let te = true_effects(&sim, &s).unwrap();
    assert!((te.direct - 0.1).abs() < 1e-12);
    assert!((te.total_border - 0.1).abs() < 1e-10);
}

#[test]
fn simulation_is_deterministic() {
    let s = DgpSettings::default();
    let a = simulate_dataset(ConfigId::FullModel, &s, 6).unwrap();
    let b = simulate_dataset(ConfigId::FullModel, &s, 6).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.tau_true, b.tau_true);
    assert_ne!(
        simulate_dataset(ConfigId::FullModel, &s, 7)
            .unwrap()
            .dataset,
        a.dataset
    );
}

#[test]
fn spatial_diffusion_conserves_mass_and_leaks_across_the_border() {
    let s = DgpSettings::default();
    let source = source_field(&s).integral();
    for id in [ConfigId::SpatialOnly, ConfigId::FullModel] {
        let field = treatment_field(id, &s).unwrap();
        let rel = field.integral() / (source / 0.25) - 1.0;
        assert!(rel.abs() < 1e-3, "{id:?}: mass off by {rel}");
    }
    let side_means = |id: ConfigId| {
        let sim = simulate_dataset(id, &s, 8).unwrap();
        let mut acc = [(0.0, 0usize); 2];
        for (u, t) in sim.dataset.units.iter().zip(&sim.tau_true) {
            let a = &mut acc[usize::from(u.x[0] > 50.0)];
            a.0 += t;
            a.1 += 1;
        }
        acc.map(|(s, n)| s / n as f64)
    };
    let [c1_out, c1_in] = side_means(ConfigId::NoSpillovers);
    let [c2_out, c2_in] = side_means(ConfigId::SpatialOnly);
    assert_eq!(c1_out, 0.0);
    assert!(
        c2_out > 0.0 && c2_in < c1_in,
        "untreated {c2_out}, treated {c2_in} vs {c1_in}"
    );
}

#[test]
fn border_truth_sits_below_the_direct_effect_under_spatial_spillovers() {
    let s = DgpSettings::default();
    for id in [ConfigId::SpatialOnly, ConfigId::FullModel] {
        let field = treatment_field(id, &s).unwrap();
        for seed in 0..3 {
            let sim = simulate_dataset_with_field(id, &s, seed, &field).unwrap();
            let te = true_effects(&sim, &s).unwrap();
            assert!(
                te.total_border > 0.0 && te.total_border < te.direct,
                "{id:?}: {te:?}"
            );
        }
    }
}

#[test]
fn external_datasets_have_no_truth() {
    let s = DgpSettings::default();
    let mut sim = simulate_dataset(ConfigId::NoSpillovers, &s, 9).unwrap();
    sim.dataset.config_id = None;
    assert!(true_effects(&sim, &s).is_err());
}

#[test]
fn dataset_files_round_trip() {
    let s = DgpSettings::default();
    let sim = simulate_dataset(ConfigId::FullModel, &s, 10).unwrap();
    let te = true_effects(&sim, &s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &sim.dataset).unwrap();
    write_truth(dir.path(), &sim.tau_true, &te).unwrap();
    assert_eq!(
        read_dataset(dir.path(), NetworkRequirement::ALL).unwrap(),
        sim.dataset
    );
    assert_eq!(read_truth(dir.path()).unwrap(), (sim.tau_true.clone(), te));

    std::fs::remove_file(dir.path().join(LAGGED_NETWORK_FILE)).unwrap();
    let err = read_dataset(dir.path(), NetworkRequirement::ALL).unwrap_err();
    assert!(err.to_string().contains("missing network file"));
    let partial = read_dataset(
        dir.path(),
        NetworkRequirement {
            network: true,
            lagged: false,
        },
    )
    .unwrap();
    assert_eq!(partial.lagged_network.n_edges(), 0);
}

#[test]
fn malformed_unit_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(UNITS_FILE), "id,x1\n0,1.0\n").unwrap();
    assert!(read_dataset(
        dir.path(),
        NetworkRequirement {
            network: false,
            lagged: false
        }
    )
    .is_err());
}

#[test]
fn grid_fields_round_trip() {
    let domain = SpatialDomain::default().with_grid([5, 4, 3]);
    let values: Vec<f64> = (0..60).map(|k| (k as f64 * 0.37).sin() / 3.0).collect();
    let field = GridField::new(domain, values).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tau.csv");
    write_grid_field(&path, &field).unwrap();
    assert_eq!(read_grid_field(&path).unwrap(), field);
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (2usize..30, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = SeedSpec::new(seed).rng("arb", 0);
        let mut f = || rng.random_range(-1e6..1e6) * rng.random::<f64>().powi(7);
        let units: Vec<UnitRecord> = (0..n)
            .map(|i| UnitRecord {
                id: i as u32,
                x: [f(), f()],
                alpha: f().abs().fract(),
                source: f(),
                controls: [f(), f(), f()],
                outcome: f(),
                degree: i as u32 % 7,
            })
            .collect();
        let mut rng = SeedSpec::new(seed).rng("edges", 0);
        let edges: Vec<(u32, u32)> = (0..n as u32)
            .flat_map(|i| (i + 1..n as u32).map(move |j| (i, j)))
            .filter(|_| rng.random::<f64>() < 0.3)
            .collect();
        let network = Adjacency::from_edges(n, &edges).unwrap();
        let lagged = Adjacency::from_edges(n, &edges[..edges.len() / 2]).unwrap();
        let config_id = if seed % 2 == 0 {
            Some(ConfigId::ALL[(seed % 4) as usize])
        } else {
            None
        };
        Dataset {
            units,
            network,
            lagged_network: lagged,
            config_id,
            seed: Some(seed),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_dataset_round_trips_exactly(ds in arb_dataset()) {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        prop_assert_eq!(read_dataset(dir.path(), NetworkRequirement::ALL).unwrap(), ds);
    }
}
