//! Feynman-Kac path simulation of the master equation.
//!
//! A path starts at the evaluation point and runs backward in calendar time:
//! after path time u it contributes the source active at calendar time t − u,
//! discounted by e^{−κu}. Each step treats the source as constant over the
//! step and integrates the discount exactly.

mod posterior;

pub use posterior::*;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde::GridField;
use crate::seed::SeedSpec;
use crate::types::{SpatialDomain, StructuralParams};

/// A source (or initial) field evaluated at a point (x¹, x², α) and calendar time.
pub trait Source: Sync {
    fn eval(&self, p: [f64; 3], t: f64) -> f64;
}

impl<F: Fn([f64; 3], f64) -> f64 + Sync> Source for F {
    fn eval(&self, p: [f64; 3], t: f64) -> f64 {
        self(p, t)
    }
}

impl Source for GridField {
    fn eval(&self, p: [f64; 3], _t: f64) -> f64 {
        self.interpolate(p)
    }
}

/// Time-invariant field that is interpolated without crossing x¹ = `border`.
pub struct SidedField<'a> {
    pub field: &'a GridField,
    pub border: f64,
}

impl Source for SidedField<'_> {
    fn eval(&self, p: [f64; 3], _t: f64) -> f64 {
        self.field.interpolate_sided(p, self.border)
    }
}

/// Policy with a random component: mean `mean` and instantaneous volatility
/// `volatility` per unit time, with independent increments.
pub struct StochasticSource<'a> {
    pub mean: &'a dyn Source,
    pub volatility: &'a dyn Source,
}

/// What to simulate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub start: [f64; 3],
    pub t: f64,
    pub dt: f64,
    /// Independent Gaussian streams; doubled when `antithetic` is set.
    pub m: usize,
    pub antithetic: bool,
    pub domain: SpatialDomain,
}

impl PathSpec {
    pub fn new(start: [f64; 3], t: f64, dt: f64, m: usize, domain: SpatialDomain) -> Self {
        Self {
            start,
            t,
            dt,
            m,
            antithetic: false,
            domain,
        }
    }

    pub fn with_antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn steps(&self) -> usize {
        (self.t / self.dt).round() as usize
    }

    pub fn n_paths(&self) -> usize {
        if self.antithetic {
            2 * self.m
        } else {
            self.m
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.t >= 0.0) || self.m == 0 {
            return Err(Error::InvalidInput(format!(
                "need dt > 0, t >= 0 and M >= 1, got dt={}, t={}, M={}",
                self.dt, self.t, self.m
            )));
        }
        if !self
            .domain
            .contains([self.start[0], self.start[1]], self.start[2])
        {
            return Err(Error::InvalidInput(format!(
                "start {:?} outside the domain",
                self.start
            )));
        }
        Ok(())
    }
}

/// Lower-triangular factor of the step covariance Σ.
#[derive(Debug, Clone, Copy)]
struct Factor {
    a: f64,
    c: f64,
    e: f64,
}

impl Factor {
    fn new(p: &StructuralParams) -> Result<Self> {
        p.ensure_valid()?;
        let a = (2.0 * p.nu_s).sqrt();
        let c = if a > 0.0 { p.lambda / a } else { 0.0 };
        let e2 = 2.0 * p.nu_n - c * c;
        if e2 < -1e-12 {
            return Err(Error::InvalidInput(
                "diffusion matrix is not positive semidefinite".into(),
            ));
        }
        Ok(Self {
            a,
            c,
            e: e2.max(0.0).sqrt(),
        })
    }
}

#[inline]
fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    if v >= lo && v <= hi {
        return v;
    }
    let w = hi - lo;
    let mut y = (v - lo).rem_euclid(2.0 * w);
    if y > w {
        y = 2.0 * w - y;
    }
    lo + y
}

/// Walks one path and calls `visit(step, position)` for steps 0..=n.
fn walk(
    f: &Factor,
    spec: &PathSpec,
    rng: &mut ChaCha8Rng,
    sign: f64,
    mut visit: impl FnMut(usize, [f64; 3]),
) {
    let n = spec.steps();
    let sq = spec.dt.sqrt() * sign;
    let r = spec.domain.ranges();
    let mut x = spec.start;
    visit(0, x);
    for step in 1..=n {
        let z: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        x[0] = reflect(x[0] + sq * f.a * z[0], r[0][0], r[0][1]);
        x[1] = reflect(x[1] + sq * f.a * z[1], r[1][0], r[1][1]);
        x[2] = reflect(x[2] + sq * (f.c * z[0] + f.e * z[2]), r[2][0], r[2][1]);
        visit(step, x);
    }
}

/// Runs `per_path` on every path (both members of an antithetic pair) and
/// returns the per-path outputs in path order. Path k uses Gaussian stream
/// k (or k/2 with negation for odd k when antithetic).
fn map_paths<T: Send>(
    params: &StructuralParams,
    spec: &PathSpec,
    seed: SeedSpec,
    per_path: impl Fn(&mut dyn FnMut(&mut dyn FnMut(usize, [f64; 3]))) -> T + Sync,
) -> Result<Vec<T>> {
    spec.validate()?;
    let f = Factor::new(params)?;
    let out = (0..spec.n_paths())
        .into_par_iter()
        .map(|k| {
            let (stream, sign) = if spec.antithetic {
                (k / 2, if k % 2 == 0 { 1.0 } else { -1.0 })
            } else {
                (k, 1.0)
            };
            let mut rng = seed.rng("path", stream as u64);
            let mut run =
                |visit: &mut dyn FnMut(usize, [f64; 3])| walk(&f, spec, &mut rng, sign, visit);
            per_path(&mut run)
        })
        .collect();
    Ok(out)
}

/// One simulated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub trajectory: Vec<[f64; 3]>,
    pub discounted_integral: f64,
    /// Index of the path driven by the negated increments.
    pub partner: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub spec: PathSpec,
    pub kappa: f64,
    pub paths: Vec<PathRecord>,
}

/// Per-step weights ∫ over [u_n, u_n + dt] of e^{−κu}, u·e^{−κu} and e^{−2κu}.
struct Weights {
    discount: Vec<f64>,
    moment: Vec<f64>,
    discount2: Vec<f64>,
}

impl Weights {
    fn new(kappa: f64, spec: &PathSpec) -> Self {
        let n = spec.steps();
        let dt = spec.dt;
        let prim = |k: f64, u: f64| if k == 0.0 { u } else { -(-k * u).exp() / k };
        let prim_u = |k: f64, u: f64| {
            if k == 0.0 {
                0.5 * u * u
            } else {
                -(u / k + 1.0 / (k * k)) * (-k * u).exp()
            }
        };
        let mut w = Self {
            discount: Vec::with_capacity(n),
            moment: Vec::with_capacity(n),
            discount2: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (u0, u1) = (i as f64 * dt, (i + 1) as f64 * dt);
            w.discount.push(prim(kappa, u1) - prim(kappa, u0));
            w.moment.push(prim_u(kappa, u1) - prim_u(kappa, u0));
            w.discount2
                .push(prim(2.0 * kappa, u1) - prim(2.0 * kappa, u0));
        }
        w
    }
}

/// Simulates and stores full trajectories with their discounted source
/// integrals. Memory grows with M·t/dt; the estimators below stream instead.
pub fn simulate_paths(
    params: &StructuralParams,
    spec: &PathSpec,
    source: Option<&dyn Source>,
    seed: SeedSpec,
) -> Result<PathBundle> {
    let w = Weights::new(params.kappa, spec);
    let n = spec.steps();
    let t = spec.steps() as f64 * spec.dt;
    let paths = map_paths(params, spec, seed, |run| {
        let mut traj = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        run(&mut |step, x| {
            traj.push(x);
            if let Some(s) = source {
                if step < n {
                    acc += w.discount[step] * s.eval(x, t - step as f64 * spec.dt);
                }
            }
        });
        (traj, acc)
    })?;
    let paths = paths
        .into_iter()
        .enumerate()
        .map(|(k, (trajectory, discounted_integral))| PathRecord {
            trajectory,
            discounted_integral,
            partner: spec.antithetic.then_some(k ^ 1),
        })
        .collect();
    Ok(PathBundle {
        spec: *spec,
        kappa: params.kappa,
        paths,
    })
}

/// End point of every path, without storing trajectories.
pub fn terminal_points(
    params: &StructuralParams,
    spec: &PathSpec,
    seed: SeedSpec,
) -> Result<Vec<[f64; 3]>> {
    let n = spec.steps();
    map_paths(params, spec, seed, |run| {
        let mut last = spec.start;
        run(&mut |step, x| {
            if step == n {
                last = x;
            }
        });
        last
    })
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FkEstimate {
    pub estimate: f64,
    pub path_se: f64,
    /// Across-path sample variance of the per-path values.
    pub path_variance: f64,
    pub n_paths: usize,
}

/// Mean and standard error of per-path values; antithetic pairs are averaged
/// first so the standard error reflects the pairing.
pub(crate) fn summarize_values(values: &[f64], antithetic: bool) -> FkEstimate {
    let units: Vec<f64> = if antithetic {
        values.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect()
    } else {
        values.to_vec()
    };
    let (mean, var_units) = mean_var(&units);
    let (_, path_variance) = mean_var(values);
    FkEstimate {
        estimate: mean,
        path_se: (var_units / units.len() as f64).sqrt(),
        path_variance,
        n_paths: values.len(),
    }
}

/// Mean and sample variance, shifted by the first value so that constant
/// inputs give exactly that value and zero.
pub(crate) fn mean_var(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, 0.0);
    }
    let c = v[0];
    let n = v.len() as f64;
    let m = v.iter().map(|x| x - c).sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - c - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (c + m, var)
}

/// Per-path values e^{−κt}τ0(X_t) + Σ_n w_n S(X_{u_n}, t − u_n).
pub fn fk_path_values(
    params: &StructuralParams,
    source: &dyn Source,
    tau0: Option<&dyn Source>,
    spec: &PathSpec,
    seed: SeedSpec,
) -> Result<Vec<f64>> {
    let w = Weights::new(params.kappa, spec);
    let n = spec.steps();
    let t = n as f64 * spec.dt;
    let terminal = (-params.kappa * t).exp();
    map_paths(params, spec, seed, |run| {
        let mut acc = 0.0;
        run(&mut |step, x| {
            if step < n {
                acc += w.discount[step] * source.eval(x, t - step as f64 * spec.dt);
            } else if let Some(t0) = tau0 {
                acc += terminal * t0.eval(x, 0.0);
            }
        });
        acc
    })
}

/// Treatment effect at `spec.start` and time `spec.t`.
pub fn fk_effect(
    params: &StructuralParams,
    source: &dyn Source,
    tau0: Option<&dyn Source>,
    spec: &PathSpec,
    seed: SeedSpec,
) -> Result<FkEstimate> {
    let v = fk_path_values(params, source, tau0, spec, seed)?;
    Ok(summarize_values(&v, spec.antithetic))
}

/// Control variate with a known expectation, integrated along the same paths.
pub struct ControlVariate<'a> {
    pub source: &'a dyn Source,
    pub expectation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlledEstimate {
    pub estimate: f64,
    pub path_se: f64,
    pub coefficient: f64,
    /// Ratio of plain to controlled per-path variance.
    pub variance_reduction: f64,
}

/// fk_effect with a regression-adjusted control variate.
pub fn fk_effect_controlled(
    params: &StructuralParams,
    source: &dyn Source,
    control: &ControlVariate<'_>,
    spec: &PathSpec,
    seed: SeedSpec,
) -> Result<ControlledEstimate> {
    let y = fk_path_values(params, source, None, spec, seed)?;
    let c = fk_path_values(params, control.source, None, spec, seed)?;
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mc = c.iter().sum::<f64>() / n;
    let cov: f64 = y
        .iter()
        .zip(&c)
        .map(|(a, b)| (a - my) * (b - mc))
        .sum::<f64>()
        / (n - 1.0);
    let vc: f64 = c.iter().map(|b| (b - mc).powi(2)).sum::<f64>() / (n - 1.0);
    let vy: f64 = y.iter().map(|a| (a - my).powi(2)).sum::<f64>() / (n - 1.0);
    let b = if vc > 0.0 { cov / vc } else { 0.0 };
    let adj: Vec<f64> = y
        .iter()
        .zip(&c)
        .map(|(a, cc)| a - b * (cc - control.expectation))
        .collect();
    let s = summarize_values(&adj, false);
    let reduction = if s.path_variance > 0.0 {
        vy / s.path_variance
    } else {
        f64::INFINITY
    };
    Ok(ControlledEstimate {
        estimate: s.estimate,
        path_se: s.path_se,
        coefficient: b,
        variance_reduction: reduction,
    })
}

/// Expectation of the discounted integral of `level·1{X¹ > border}` for a
/// path without boundaries, whose x¹ marginal at path time u is
/// N(x¹₀, 2ν_s u). Evaluated by Gauss–Legendre quadrature in u.
pub fn border_indicator_expectation(
    params: &StructuralParams,
    border: f64,
    level: f64,
    x1: f64,
    t: f64,
) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let prob = |u: f64| {
        let sd = (2.0 * params.nu_s * u).sqrt();
        if sd == 0.0 {
            if x1 > border {
                1.0
            } else {
                0.0
            }
        } else {
            std_normal.cdf((x1 - border) / sd)
        }
    };
    // composite 8-point Gauss–Legendre over 64 panels
    const X: [f64; 4] = [
        0.1834346424956498,
        0.5255324099163290,
        0.7966664774136267,
        0.9602898564975363,
    ];
    const W: [f64; 4] = [
        0.3626837833783620,
        0.3137066458778873,
        0.2223810344533745,
        0.1012285362903763,
    ];
    let panels = 64;
    let h = t / panels as f64;
    let mut acc = 0.0;
    for k in 0..panels {
        let mid = (k as f64 + 0.5) * h;
        for (x, w) in X.iter().zip(W) {
            for u in [mid - 0.5 * h * x, mid + 0.5 * h * x] {
                acc += 0.5 * h * w * (-params.kappa * u).exp() * prob(u);
            }
        }
    }
    level * acc
}

/// Source for [`fk_variance`].
pub enum VarianceSource<'a> {
    /// Variance arising from path randomness alone.
    Deterministic(&'a dyn Source),
    /// E ∫ e^{−2κu} σ_S(X_u)² du for a policy with independent increments.
    Stochastic(&'a StochasticSource<'a>),
}

pub fn fk_variance(
    params: &StructuralParams,
    source: VarianceSource<'_>,
    spec: &PathSpec,
    seed: SeedSpec,
) -> Result<f64> {
    match source {
        VarianceSource::Deterministic(s) => {
            let v = fk_path_values(params, s, None, spec, seed)?;
            Ok(summarize_values(&v, false).path_variance)
        }
        VarianceSource::Stochastic(ss) => {
            let w = Weights::new(params.kappa, spec);
            let n = spec.steps();
            let t = n as f64 * spec.dt;
            let v = map_paths(params, spec, seed, |run| {
                let mut acc = 0.0;
                run(&mut |step, x| {
                    if step < n {
                        let sig = ss.volatility.eval(x, t - step as f64 * spec.dt);
                        acc += w.discount2[step] * sig * sig;
                    }
                });
                acc
            })?;
            Ok(v.iter().sum::<f64>() / v.len() as f64)
        }
    }
}

/// ∂τ/∂κ = −E ∫ u e^{−κu} S(X_u, t − u) du (zero initial condition).
pub fn sensitivity_kappa(
    params: &StructuralParams,
    source: &dyn Source,
    spec: &PathSpec,
    seed: SeedSpec,
) -> Result<FkEstimate> {
    let w = Weights::new(params.kappa, spec);
    let n = spec.steps();
    let t = n as f64 * spec.dt;
    let v = map_paths(params, spec, seed, |run| {
        let mut acc = 0.0;
        run(&mut |step, x| {
            if step < n {
                acc -= w.moment[step] * source.eval(x, t - step as f64 * spec.dt);
            }
        });
        acc
    })?;
    Ok(summarize_values(&v, spec.antithetic))
}

/// Finite-difference gradient of fk_effect with respect to (ν_s, ν_n, κ, λ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdSensitivities {
    pub gradient: [f64; 4],
    /// Step actually used per component.
    pub steps: [f64; 4],
    pub warnings: Vec<String>,
}

const COMPONENT_NAMES: [&str; 4] = ["nu_s", "nu_n", "kappa", "lambda"];

/// One component of the finite-difference gradient with common random
/// numbers. Uses a central difference when both perturbed points are
/// admissible, otherwise a one-sided one; halves the step until some
/// admissible difference exists.
pub fn sensitivity_fd(
    params: &StructuralParams,
    source: &dyn Source,
    spec: &PathSpec,
    seed: SeedSpec,
    component: usize,
    h: f64,
) -> Result<(f64, f64, Option<String>)> {
    if component > 3 || !(h > 0.0) {
        return Err(Error::InvalidInput(format!(
            "component {component} with step {h}"
        )));
    }
    let shifted = |d: f64| {
        let mut a = params.as_array();
        a[component] += d;
        StructuralParams::from_array(a)
    };
    let eval = |p: &StructuralParams| fk_effect(p, source, None, spec, seed).map(|e| e.estimate);
    let mut step = h;
    let mut warning = None;
    for _ in 0..60 {
        let (up, dn) = (shifted(step), shifted(-step));
        let (ok_up, ok_dn) = (up.is_valid(), dn.is_valid());
        if ok_up && ok_dn {
            return Ok(((eval(&up)? - eval(&dn)?) / (2.0 * step), step, warning));
        }
        if ok_up || ok_dn {
            let note = format!(
                "{}: one-sided difference at step {step:e}",
                COMPONENT_NAMES[component]
            );
            let g = if ok_up {
                (eval(&up)? - eval(params)?) / step
            } else {
                (eval(params)? - eval(&dn)?) / step
            };
            return Ok((g, step, Some(note)));
        }
        step *= 0.5;
        warning = Some(format!(
            "{}: step shrunk to {step:e}",
            COMPONENT_NAMES[component]
        ));
    }
    Err(Error::InvalidParams(format!(
        "no admissible perturbation of {} around {:?}",
        COMPONENT_NAMES[component], params
    )))
}

pub fn sensitivities_fd(
    params: &StructuralParams,
    source: &dyn Source,
    spec: &PathSpec,
    seed: SeedSpec,
    h: [f64; 4],
) -> Result<FdSensitivities> {
    let mut out = FdSensitivities {
        gradient: [0.0; 4],
        steps: [0.0; 4],
        warnings: Vec::new(),
    };
    for c in 0..4 {
        let (g, s, w) = sensitivity_fd(params, source, spec, seed, c, h[c])?;
        out.gradient[c] = g;
        out.steps[c] = s;
        out.warnings.extend(w);
    }
    Ok(out)
}
