//! Synthetic economies: geography, supply-chain network, policy exposure,
//! controls and outcomes generated from the steady-state treatment field.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgen::{generate_network, lag_network, GravityParams};
use crate::pde::{steady_state_dgp, GridField, SolverOptions};
use crate::seed::SeedSpec;
use crate::types::{config_params, ConfigId, Dataset, SpatialDomain, UnitRecord};

/// How unit locations and market positions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geography {
    /// Independent uniform locations and market positions.
    #[default]
    Uniform,
    /// Units attach to random cluster centres, each with its own market
    /// position, so location and market position become dependent.
    Clustered {
        centers: usize,
        spread: f64,
        alpha_spread: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpSettings {
    pub n_units: usize,
    /// Base policy exposure S₀.
    pub s0: f64,
    pub gravity: GravityParams,
    pub control_noise_sd: f64,
    pub outcome_noise_sd: f64,
    pub gamma: [f64; 3],
    /// PDE lattice over (x¹, x², α).
    pub grid: [usize; 3],
    pub rewire_fraction: f64,
    /// Scale that maps one unit of τ per unit of S into the reported direct
    /// effect; with κ = 0.25 the default puts the true direct effect at 0.100.
    pub effect_scale: f64,
    /// Treated half-plane is x¹ > border.
    pub border: f64,
    /// Half-width of the band of treated units that defines the total border effect.
    pub border_band: f64,
    pub geography: Geography,
    pub solver: SolverOptions,
}

impl Default for DgpSettings {
    fn default() -> Self {
        Self {
            n_units: 500,
            s0: 0.10,
            gravity: GravityParams::default(),
            control_noise_sd: 0.25,
            outcome_noise_sd: 0.05,
            gamma: [0.1, 0.1, 0.1],
            grid: [64, 64, 16],
            rewire_fraction: 0.2,
            effect_scale: 0.025,
            border: 50.0,
            border_band: 5.0,
            geography: Geography::Uniform,
            solver: SolverOptions::default(),
        }
    }
}

impl DgpSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n_units < 10 {
            return bad(format!("n_units = {} < 10", self.n_units));
        }
        if !(self.control_noise_sd > 0.0 && self.outcome_noise_sd > 0.0) {
            return bad("noise standard deviations must be positive".into());
        }
        if self.grid[0] < 32 || self.grid[1] < 32 || self.grid[2] < 8 {
            return bad(format!("PDE grid {:?} below 32×32×8", self.grid));
        }
        if !(0.0..=1.0).contains(&self.rewire_fraction) {
            return bad(format!(
                "rewire_fraction {} outside [0, 1]",
                self.rewire_fraction
            ));
        }
        if !(self.s0.is_finite() && self.effect_scale > 0.0 && self.border_band > 0.0) {
            return bad("s0 must be finite and effect_scale, border_band positive".into());
        }
        if let Geography::Clustered {
            centers,
            spread,
            alpha_spread,
        } = self.geography
        {
            if centers == 0 || !(spread > 0.0) || !(alpha_spread > 0.0) {
                return bad("clustered geography needs centers >= 1 and positive spreads".into());
            }
        }
        self.gravity.validate()?;
        self.solver.validate()?;
        self.domain().validate()
    }

    pub fn domain(&self) -> SpatialDomain {
        SpatialDomain::default().with_grid(self.grid)
    }
}

fn reflect_unit(v: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    let mut y = (v - lo).rem_euclid(2.0 * w);
    if y > w {
        y = 2.0 * w - y;
    }
    lo + y
}

/// Unit locations on [0,100]² and market positions on [0,1].
pub fn make_geography<R: Rng + ?Sized>(
    settings: &DgpSettings,
    rng: &mut R,
) -> (Vec<[f64; 2]>, Vec<f64>) {
    let d = settings.domain();
    let (xr, yr) = (d.x1_range, d.x2_range);
    let n = settings.n_units;
    match settings.geography {
        Geography::Uniform => {
            let mut coords = Vec::with_capacity(n);
            let mut alphas = Vec::with_capacity(n);
            for _ in 0..n {
                coords.push([
                    rng.random_range(xr[0]..xr[1]),
                    rng.random_range(yr[0]..yr[1]),
                ]);
                alphas.push(rng.random::<f64>());
            }
            (coords, alphas)
        }
        Geography::Clustered {
            centers,
            spread,
            alpha_spread,
        } => {
            let cs: Vec<([f64; 2], f64)> = (0..centers)
                .map(|_| {
                    (
                        [
                            rng.random_range(xr[0]..xr[1]),
                            rng.random_range(yr[0]..yr[1]),
                        ],
                        rng.random::<f64>(),
                    )
                })
                .collect();
            let nx = Normal::new(0.0, spread).expect("positive spread");
            let na = Normal::new(0.0, alpha_spread).expect("positive spread");
            let mut coords = Vec::with_capacity(n);
            let mut alphas = Vec::with_capacity(n);
            for _ in 0..n {
                let (c, a) = cs[rng.random_range(0..centers)];
                coords.push([
                    reflect_unit(c[0] + nx.sample(rng), xr[0], xr[1]),
                    reflect_unit(c[1] + nx.sample(rng), yr[0], yr[1]),
                ]);
                alphas.push(reflect_unit(a + na.sample(rng), 0.0, 1.0));
            }
            (coords, alphas)
        }
    }
}

/// S = S₀·1{x¹ > border}·(1 + 0.3α).
#[inline]
pub fn source_value(x1: f64, alpha: f64, s0: f64, border: f64) -> f64 {
    if x1 > border {
        s0 * (1.0 + 0.3 * alpha)
    } else {
        0.0
    }
}

pub fn source_term(coords: &[[f64; 2]], alphas: &[f64], s0: f64) -> Vec<f64> {
    coords
        .iter()
        .zip(alphas)
        .map(|(c, &a)| source_value(c[0], a, s0, 50.0))
        .collect()
}

/// The source sampled at every lattice node.
pub fn source_field(settings: &DgpSettings) -> GridField {
    let (s0, b) = (settings.s0, settings.border);
    GridField::from_fn(settings.domain(), |x1, _, a| source_value(x1, a, s0, b))
}

/// X₁ = 0.5α + u₁, X₂ = ln(|x¹ − border| + 1) + u₂, X₃ = degree/15 + u₃.
pub fn make_controls<R: Rng + ?Sized>(
    alphas: &[f64],
    coords: &[[f64; 2]],
    degrees: &[usize],
    noise_sd: f64,
    border: f64,
    rng: &mut R,
) -> Vec<[f64; 3]> {
    let u = Normal::new(0.0, noise_sd).expect("positive noise sd");
    (0..alphas.len())
        .map(|i| {
            let base = [
                0.5 * alphas[i],
                ((coords[i][0] - border).abs() + 1.0).ln(),
                degrees[i] as f64 / 15.0,
            ];
            let e = [u.sample(rng), u.sample(rng), u.sample(rng)];
            [base[0] + e[0], base[1] + e[1], base[2] + e[2]]
        })
        .collect()
}

/// Steady-state treatment field of a configuration; depends only on the
/// settings, so it can be shared across replications.
pub fn treatment_field(config: ConfigId, settings: &DgpSettings) -> Result<GridField> {
    settings.validate()?;
    steady_state_dgp(
        &config_params(config),
        &source_field(settings),
        &settings.solver,
    )
}

/// A generated dataset together with the true treatment at every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub dataset: Dataset,
    pub tau_true: Vec<f64>,
}

pub fn simulate_dataset(
    config: ConfigId,
    settings: &DgpSettings,
    seed: u64,
) -> Result<SimulatedDataset> {
    let field = treatment_field(config, settings)?;
    simulate_dataset_with_field(config, settings, seed, &field)
}

/// As [`simulate_dataset`] with a precomputed [`treatment_field`].
pub fn simulate_dataset_with_field(
    config: ConfigId,
    settings: &DgpSettings,
    seed: u64,
    field: &GridField,
) -> Result<SimulatedDataset> {
    settings.validate()?;
    if field.domain != settings.domain() {
        return Err(Error::InvalidInput(
            "treatment field lattice does not match settings".into(),
        ));
    }
    let spec = SeedSpec::new(seed);
    let (coords, alphas) = make_geography(settings, &mut spec.rng("geography", 0));
    let network = generate_network(
        &coords,
        &alphas,
        &settings.gravity,
        &mut spec.rng("network", 0),
    )?;
    let lagged = lag_network(
        &network,
        &coords,
        &alphas,
        &settings.gravity,
        settings.rewire_fraction,
        &mut spec.rng("lagged", 0),
    )?;
    let degrees = network.degrees();
    let controls = make_controls(
        &alphas,
        &coords,
        &degrees,
        settings.control_noise_sd,
        settings.border,
        &mut spec.rng("controls", 0),
    );
    let eps = Normal::new(0.0, settings.outcome_noise_sd).expect("positive noise sd");
    let mut noise = spec.rng("noise", 0);
    let mut units = Vec::with_capacity(coords.len());
    let mut tau_true = Vec::with_capacity(coords.len());
    for i in 0..coords.len() {
        let tau = field.interpolate_sided([coords[i][0], coords[i][1], alphas[i]], settings.border);
        let xg: f64 = (0..3).map(|k| controls[i][k] * settings.gamma[k]).sum();
        units.push(UnitRecord {
            id: i as u32,
            x: coords[i],
            alpha: alphas[i],
            source: source_value(coords[i][0], alphas[i], settings.s0, settings.border),
            controls: controls[i],
            outcome: tau + xg + eps.sample(&mut noise),
            degree: degrees[i] as u32,
        });
        tau_true.push(tau);
    }
    let dataset = Dataset {
        units,
        network,
        lagged_network: lagged,
        config_id: Some(config),
        seed: Some(seed),
    };
    Ok(SimulatedDataset { dataset, tau_true })
}

/// True values of the two reported estimands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueEffects {
    /// effect_scale/κ: response per unit of exposure without spillovers.
    pub direct: f64,
    /// effect_scale · mean τ / mean S over treated units within the border band.
    pub total_border: f64,
}

/// Indices of treated units with x¹ in (border, border + band].
pub fn border_band_units(ds: &Dataset, border: f64, band: f64) -> Vec<usize> {
    ds.units
        .iter()
        .enumerate()
        .filter(|(_, u)| u.x[0] > border && u.x[0] <= border + band)
        .map(|(i, _)| i)
        .collect()
}

pub fn true_effects(sim: &SimulatedDataset, settings: &DgpSettings) -> Result<TrueEffects> {
    let config = sim
        .dataset
        .config_id
        .ok_or_else(|| Error::InvalidInput("true effects need a simulated dataset".into()))?;
    let kappa = config_params(config).kappa;
    let band = border_band_units(&sim.dataset, settings.border, settings.border_band);
    if band.is_empty() {
        return Err(Error::InsufficientData(
            "no treated units in the border band".into(),
        ));
    }
    let tau: f64 = band.iter().map(|&i| sim.tau_true[i]).sum();
    let s: f64 = band.iter().map(|&i| sim.dataset.units[i].source).sum();
    Ok(TrueEffects {
        direct: settings.effect_scale / kappa,
        total_border: settings.effect_scale * tau / s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn source_formula() {
        assert_eq!(source_value(60.0, 0.0, 0.10, 50.0), 0.10);
        assert_eq!(source_value(40.0, 0.7, 0.10, 50.0), 0.0);
        assert!((source_value(60.0, 1.0, 0.10, 50.0) - 0.13).abs() < 1e-15);
        assert_eq!(source_value(50.0, 1.0, 0.10, 50.0), 0.0);
    }

    #[test]
    fn controls_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = make_controls(&[1.0], &[[50.0, 3.0]], &[15], 1e-300, 50.0, &mut rng);
        assert!((x[0][0] - 0.5).abs() < 1e-12);
        assert!(x[0][1].abs() < 1e-12);
        assert!((x[0][2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn settings_validation() {
        assert!(DgpSettings::default().validate().is_ok());
        assert!(DgpSettings {
            n_units: 5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DgpSettings {
            grid: [16, 64, 16],
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
