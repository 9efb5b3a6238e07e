//! Structural GMM over (ν_s, ν_n, κ, λ).
//!
//! The steady state is linear in the source, so τ_θ = T(ρ)/κ with
//! ρ = (ν_s, ν_n, λ)/κ and T the solution for unit decay. The search runs
//! over ρ with b = 1/κ profiled out of each objective evaluation.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::hac::{hac_cov, network_distances, HacSpec};
use super::mi::ksg_terms;
use super::{
    mean_where, network_exposure, Estimate, EstimateReport, EstimatorContext, StructuralEstimate,
    TestStatistic,
};
use crate::error::{Error, Result};
use crate::linalg::{chi2_sf, independent_columns, pinv_sym, select_columns};
use crate::optim::{golden_section, nelder_mead};
use crate::pde::{steady_state_linear_from, GridField, SolverOptions};
use crate::types::{config_params, ConfigId, Dataset, SpatialDomain, StructuralParams};

pub const N_MOMENTS: usize = 8;
const B_RANGE: [f64; 2] = [1e-3, 1e3];
const RHO_S_SCALE: f64 = 20.0;
const RHO_N_SCALE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmOptions {
    /// Lattice nodes along x¹ and α for the model solve.
    pub grid: [usize; 2],
    /// Multistart points.
    pub starts: Vec<StructuralParams>,
    pub mi_neighbors: usize,
    /// Distances from the border at which side differentials are matched.
    pub rd_knots: [f64; 5],
    /// Triangular kernel half-widths for the knots.
    pub rd_bandwidths: [f64; 5],
    /// Evaluation cap for each multistart run.
    pub start_evaluations: usize,
    /// Evaluation cap for each refinement run.
    pub max_evaluations: usize,
    pub ftol: f64,
    pub xtol: f64,
    /// Relative eigenvalue floor when inverting the moment covariance.
    pub weight_floor: f64,
    pub solver: SolverOptions,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            grid: [64, 16],
            starts: ConfigId::ALL.iter().map(|&c| config_params(c)).collect(),
            mi_neighbors: 3,
            rd_knots: [2.5, 7.5, 15.0, 25.0, 40.0],
            rd_bandwidths: [5.0, 5.0, 7.5, 10.0, 15.0],
            start_evaluations: 50,
            max_evaluations: 400,
            ftol: 1e-8,
            xtol: 1e-4,
            weight_floor: 1e-10,
            solver: SolverOptions {
                tolerance: 1e-9,
                ..SolverOptions::default()
            },
        }
    }
}

impl GmmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.grid[0] < 3 || self.grid[1] < 3 {
            return Err(Error::InvalidInput(format!(
                "GMM grid {:?} needs at least 3 nodes per axis",
                self.grid
            )));
        }
        if self.starts.is_empty() {
            return Err(Error::InvalidInput("GMM needs at least one start".into()));
        }
        for s in &self.starts {
            s.ensure_valid()?;
        }
        if self.rd_bandwidths.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::InvalidInput(
                "RD knot bandwidths must be positive".into(),
            ));
        }
        if self.start_evaluations == 0 || self.max_evaluations == 0 {
            return Err(Error::InvalidInput(
                "evaluation caps must be positive".into(),
            ));
        }
        self.solver.validate()
    }
}

/// Moment means and per-unit contributions at one parameter value.
#[derive(Debug, Clone)]
pub struct MomentBreakdown {
    pub names: Vec<String>,
    pub mean: DVector<f64>,
    pub contributions: DMatrix<f64>,
}

/// Data-dependent pieces of the GMM criterion, built once per dataset.
pub struct GmmProblem<'a> {
    ds: &'a Dataset,
    ctx: EstimatorContext,
    opts: GmmOptions,
    domain: SpatialDomain,
    source: GridField,
    /// Orthonormal basis of [1, X].
    basis: DMatrix<f64>,
    /// Standardized instruments: S, lagged-network exposure, five RD weights.
    instruments: DMatrix<f64>,
    y_resid: DVector<f64>,
    ksg: Vec<f64>,
    mi: f64,
    hac: HacSpec,
    hops: Vec<Vec<(u32, u32)>>,
    coords: Vec<[f64; 2]>,
    band: Vec<bool>,
    s_band: f64,
    warm: RefCell<Option<GridField>>,
    pub warnings: Vec<String>,
}

fn standardize(v: &mut [f64]) -> bool {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return false;
    }
    v.iter_mut().for_each(|x| *x = (*x - m) / sd);
    true
}

/// Inverse with eigenvalues floored at `floor` times the largest.
fn floored_inverse(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let s = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l));
    let lo = (floor * lmax).max(f64::MIN_POSITIVE);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(lo)));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

impl<'a> GmmProblem<'a> {
    pub fn new(
        ds: &'a Dataset,
        hac: &HacSpec,
        opts: &GmmOptions,
        ctx: &EstimatorContext,
    ) -> Result<Self> {
        ds.validate()?;
        opts.validate()?;
        hac.validate()?;
        let n = ds.n();
        if ds.lagged_network.n() != n {
            return Err(Error::InvalidInput("GMM needs a lagged network".into()));
        }
        let treated = ctx.treated(ds);
        let n1 = treated.iter().filter(|&&t| t).count();
        if n1 < 3 || n - n1 < 3 {
            return Err(Error::InsufficientData(
                "GMM needs units on both sides of the border".into(),
            ));
        }
        let mut warnings = Vec::new();

        // Exposure on the lattice: affine in α on the treated side, fitted from the data.
        let (a0, a1) = {
            let pts: Vec<(f64, f64)> = ds
                .units
                .iter()
                .filter(|u| u.x[0] > ctx.border)
                .map(|u| (u.alpha, u.source))
                .collect();
            let m = pts.len() as f64;
            let (ma, ms) = (
                pts.iter().map(|p| p.0).sum::<f64>() / m,
                pts.iter().map(|p| p.1).sum::<f64>() / m,
            );
            let saa: f64 = pts.iter().map(|p| (p.0 - ma).powi(2)).sum();
            let sas: f64 = pts.iter().map(|p| (p.0 - ma) * (p.1 - ms)).sum();
            let slope = if saa > 0.0 { sas / saa } else { 0.0 };
            let worst = pts
                .iter()
                .map(|p| (p.1 - ms - slope * (p.0 - ma)).abs())
                .fold(0.0, f64::max);
            if worst > 1e-8 * ms.abs().max(1e-12) {
                warnings
                    .push("exposure is not affine in market position; using its linear fit".into());
            }
            (ms - slope * ma, slope)
        };
        let base = SpatialDomain::default();
        let domain = SpatialDomain {
            x2_range: ctx.x2_range,
            grid: [opts.grid[0], 1, opts.grid[1]],
            ..base
        };
        domain.validate()?;
        let border = ctx.border;
        let source =
            GridField::from_fn(
                domain.clone(),
                |x1, _, a| if x1 > border { a0 + a1 * a } else { 0.0 },
            );

        let mut ctrl = DMatrix::<f64>::zeros(n, 4);
        for i in 0..n {
            ctrl[(i, 0)] = 1.0;
            for k in 0..3 {
                ctrl[(i, k + 1)] = ds.units[i].controls[k];
            }
        }
        let kept = independent_columns(&ctrl, 1e-9);
        let basis = select_columns(&ctrl, &kept).qr().q();
        let y = DVector::from_vec(ds.outcomes());
        let y_resid = &y - &basis * (basis.transpose() * &y);

        let s = ds.sources();
        let mut cols: Vec<Vec<f64>> = vec![s.clone(), network_exposure(&ds.lagged_network, &s)];
        let d: Vec<f64> = ds.units.iter().map(|u| (u.x[0] - border).abs()).collect();
        for (&knot, &h) in opts.rd_knots.iter().zip(&opts.rd_bandwidths) {
            let k: Vec<f64> = d
                .iter()
                .map(|&di| (1.0 - ((di - knot) / h).abs()).max(0.0))
                .collect();
            let w1: f64 = (0..n).filter(|&i| treated[i]).map(|i| k[i]).sum();
            let w0: f64 = (0..n).filter(|&i| !treated[i]).map(|i| k[i]).sum();
            if !(w1 > 0.0 && w0 > 0.0) {
                return Err(Error::InsufficientData(format!(
                    "no units on one side near distance {knot}"
                )));
            }
            cols.push(
                (0..n)
                    .map(|i| {
                        if treated[i] {
                            k[i] * n as f64 / w1
                        } else {
                            -k[i] * n as f64 / w0
                        }
                    })
                    .collect(),
            );
        }
        let mut instruments = DMatrix::<f64>::zeros(n, cols.len());
        for (j, mut c) in cols.into_iter().enumerate() {
            if j < 2 && !standardize(&mut c) {
                return Err(Error::InsufficientData(
                    "an instrument has no variation".into(),
                ));
            }
            if j >= 2 {
                let sd = (c.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
                c.iter_mut().for_each(|x| *x /= sd);
            }
            instruments.column_mut(j).copy_from_slice(&c);
        }

        let coords: Vec<[f64; 2]> = ds.units.iter().map(|u| u.x).collect();
        let alphas: Vec<f64> = ds.units.iter().map(|u| u.alpha).collect();
        let (ksg, jittered) = ksg_terms(&coords, &alphas, opts.mi_neighbors)?;
        if jittered > 0 {
            warnings.push(format!(
                "{jittered} duplicate points jittered in the entropy moment"
            ));
        }
        let mi = ksg.iter().sum::<f64>() / n as f64;
        let band = ctx.band(ds);
        let s_band = mean_where(&s, &band);
        Ok(Self {
            ds,
            ctx: *ctx,
            opts: opts.clone(),
            domain,
            source,
            basis,
            instruments,
            y_resid,
            ksg,
            mi,
            hac: *hac,
            hops: network_distances(&ds.network, hac.max_hops()),
            coords,
            band,
            s_band,
            warm: RefCell::new(None),
            warnings,
        })
    }

    pub fn moment_names() -> Vec<String> {
        let mut v = vec!["iv_exposure".to_string(), "iv_lagged_network".to_string()];
        v.extend((1..=5).map(|k| format!("rd_knot{k}")));
        v.push("entropy".into());
        v
    }

    /// Mean of the per-unit entropy terms (the unclipped estimate).
    pub fn mutual_information(&self) -> f64 {
        self.mi
    }

    /// Unit-decay solution T(ρ) at every unit.
    fn unit_response(&self, rho: [f64; 3]) -> Result<Vec<f64>> {
        let p = StructuralParams::new(rho[0], rho[1], 1.0, rho[2]);
        let guess = self.warm.borrow().clone();
        let t = steady_state_linear_from(&p, &self.source, &self.opts.solver, guess.as_ref())?;
        let out = self
            .ds
            .units
            .iter()
            .map(|u| {
                t.interpolate_sided([u.x[0], self.domain.x2_range[0], u.alpha], self.ctx.border)
            })
            .collect();
        *self.warm.borrow_mut() = Some(t);
        Ok(out)
    }

    fn residualize(&self, t: &[f64]) -> DVector<f64> {
        let t = DVector::from_row_slice(t);
        &t - &self.basis * (self.basis.transpose() * &t)
    }

    fn linear_parts(&self, t_resid: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.ds.n() as f64;
        (
            (self.instruments.transpose() * &self.y_resid) / n,
            (self.instruments.transpose() * t_resid) / n,
        )
    }

    fn stack(&self, my: &DVector<f64>, mt: &DVector<f64>, rho_l: f64, b: f64) -> DVector<f64> {
        let mut g = DVector::zeros(N_MOMENTS);
        for k in 0..7 {
            g[k] = my[k] - b * mt[k];
        }
        g[7] = rho_l / b - self.mi;
        g
    }

    /// Best b for fixed ρ and its criterion value.
    fn profile_b(
        &self,
        my: &DVector<f64>,
        mt: &DVector<f64>,
        rho_l: f64,
        w: &DMatrix<f64>,
    ) -> (f64, f64) {
        let q = |b: f64| {
            let g = self.stack(my, mt, rho_l, b);
            (g.transpose() * w * &g)[(0, 0)]
        };
        let mut m = DVector::zeros(N_MOMENTS);
        let mut a = DVector::zeros(N_MOMENTS);
        for k in 0..7 {
            m[k] = mt[k];
            a[k] = my[k];
        }
        a[7] = -self.mi;
        let den = (m.transpose() * w * &m)[(0, 0)];
        let b0 = if den > 0.0 {
            ((m.transpose() * w * &a)[(0, 0)] / den).clamp(B_RANGE[0], B_RANGE[1])
        } else {
            1.0
        };
        if rho_l == 0.0 {
            return (b0, q(b0));
        }
        let (lo, hi) = (
            (b0.ln() - 3.0).max(B_RANGE[0].ln()),
            (b0.ln() + 3.0).min(B_RANGE[1].ln()),
        );
        let (lb, v) = golden_section(&mut |x| q(x.exp()), lo, hi, 1e-10);
        (lb.exp(), v)
    }

    fn rho_from_u(u: &[f64]) -> [f64; 3] {
        let rs = (RHO_S_SCALE * u[0]).powi(2);
        let rn = (RHO_N_SCALE * u[1]).powi(2);
        let rl = u[2].tanh() * 2.0 * (rs * rn).sqrt() * (1.0 - 1e-9);
        [rs, rn, rl]
    }

    fn u_from_theta(p: &StructuralParams) -> [f64; 3] {
        let (rs, rn, rl) = (p.nu_s / p.kappa, p.nu_n / p.kappa, p.lambda / p.kappa);
        let bound = 2.0 * (rs * rn).sqrt();
        let t = if bound > 0.0 {
            (rl / bound).clamp(-0.999, 0.999).atanh()
        } else {
            0.0
        };
        [rs.sqrt() / RHO_S_SCALE, rn.sqrt() / RHO_N_SCALE, t]
    }

    fn profiled(&self, rho: [f64; 3], w: &DMatrix<f64>) -> Result<(f64, f64)> {
        let t = self.unit_response(rho)?;
        let (my, mt) = self.linear_parts(&self.residualize(&t));
        Ok(self.profile_b(&my, &mt, rho[2], w))
    }

    /// Moments at θ.
    pub fn moments(&self, theta: &StructuralParams) -> Result<MomentBreakdown> {
        theta.ensure_valid()?;
        let b = 1.0 / theta.kappa;
        let rho = [theta.nu_s * b, theta.nu_n * b, theta.lambda * b];
        let t_resid = self.residualize(&self.unit_response(rho)?);
        Ok(self.breakdown(&t_resid, rho[2], b))
    }

    fn breakdown(&self, t_resid: &DVector<f64>, rho_l: f64, b: f64) -> MomentBreakdown {
        let n = self.ds.n();
        let mut c = DMatrix::<f64>::zeros(n, N_MOMENTS);
        for i in 0..n {
            let e = self.y_resid[i] - b * t_resid[i];
            for k in 0..7 {
                c[(i, k)] = self.instruments[(i, k)] * e;
            }
            c[(i, 7)] = rho_l / b - self.ksg[i];
        }
        let mean = c.row_mean().transpose();
        MomentBreakdown {
            names: Self::moment_names(),
            mean,
            contributions: c,
        }
    }

    /// ḡ(θ)'Wḡ(θ).
    pub fn objective(&self, theta: &StructuralParams, w: &DMatrix<f64>) -> Result<f64> {
        let g = self.moments(theta)?.mean;
        Ok((g.transpose() * w * &g)[(0, 0)])
    }

    /// HAC covariance of √N·ḡ.
    pub fn moment_covariance(&self, m: &MomentBreakdown) -> DMatrix<f64> {
        let n = self.ds.n();
        let mut centred = m.contributions.clone();
        for i in 0..n {
            let r = centred.row(i) - m.mean.transpose();
            centred.row_mut(i).copy_from(&r);
        }
        hac_cov(&centred, &self.coords, &self.hops, &self.hac) / n as f64
    }

    /// Minimizes the profiled criterion from `starts`; returns (u, b, value, converged, evaluations).
    fn minimize(&self, starts: &[[f64; 3]], w: &DMatrix<f64>) -> (Vec<f64>, f64, f64, bool, usize) {
        let mut f = |u: &[f64]| {
            self.profiled(Self::rho_from_u(u), w)
                .map_or(f64::INFINITY, |r| r.1)
        };
        let step = [0.3, 0.3, 0.5];
        let (o, ftol, xtol) = (&self.opts, self.opts.ftol, self.opts.xtol);
        let mut evals = 0;
        let mut best: Option<crate::optim::Minimum> = None;
        if starts.len() > 1 {
            for s in starts {
                let m = nelder_mead(&mut f, s, &step, ftol, xtol, o.start_evaluations);
                evals += m.evaluations;
                if best.as_ref().is_none_or(|b| m.value < b.value) {
                    best = Some(m);
                }
            }
        }
        let x0 = best.map_or(starts[0].to_vec(), |b| b.x);
        let mut m = nelder_mead(&mut f, &x0, &step, ftol, xtol, o.max_evaluations);
        evals += m.evaluations;
        // A restart guards against a collapsed simplex.
        let small: Vec<f64> = step.iter().map(|s| 0.2 * s).collect();
        let r = nelder_mead(&mut f, &m.x, &small, ftol, xtol, o.max_evaluations);
        evals += r.evaluations;
        let converged = r.converged;
        if r.value <= m.value {
            m = r;
        }
        let rho = Self::rho_from_u(&m.x);
        let b = self.profiled(rho, w).map_or(f64::NAN, |r| r.0);
        (m.x, b, m.value, converged, evals)
    }
}

/// Mean of T over the border band and its gradient in ρ, by central or
/// one-sided differences.
struct Jacobian {
    /// ∂ḡ/∂(ρ_s, ρ_n, ρ_λ, b); fixed columns are zero.
    g: DMatrix<f64>,
    free: [bool; 4],
    band_t: f64,
    band_grad: [f64; 3],
}

fn jacobian(p: &GmmProblem, rho: [f64; 3], b: f64) -> Result<Jacobian> {
    let h = p.domain.spacing();
    // Below a tenth of a cell the diffusion lengths are not resolved.
    let free_s = rho[0].sqrt() > 0.1 * h[0];
    let free_n = rho[1].sqrt() > 0.1 * h[2];
    let lbound = 2.0 * (rho[0] * rho[1]).sqrt();
    let free = [free_s, free_n, free_s && free_n && lbound > 0.0, true];
    let eval = |r: [f64; 3]| -> Result<(DVector<f64>, f64)> {
        let t = p.unit_response(r)?;
        let band_t = mean_where(&t, &p.band);
        let (my, mt) = p.linear_parts(&p.residualize(&t));
        Ok((p.stack(&my, &mt, r[2], b), band_t))
    };
    let (g0, band_t) = eval(rho)?;
    let mut g = DMatrix::<f64>::zeros(N_MOMENTS, 4);
    let mut band_grad = [0.0; 3];
    for j in 0..3 {
        if !free[j] {
            continue;
        }
        let step = match j {
            0 => 1e-3 * rho[0],
            1 => 1e-3 * rho[1],
            _ => 1e-3 * lbound,
        };
        // Shrinking a diffusivity must keep λ² ≤ 4ν_sν_n.
        let psd_after = |rs: f64, rn: f64| rho[2] * rho[2] <= 4.0 * rs * rn;
        let (lo_ok, hi_ok) = match j {
            0 => (
                rho[0] - step >= 0.0 && psd_after(rho[0] - step, rho[1]),
                true,
            ),
            1 => (
                rho[1] - step >= 0.0 && psd_after(rho[0], rho[1] - step),
                true,
            ),
            _ => (rho[2] - step >= -lbound, rho[2] + step <= lbound),
        };
        let shifted = |d: f64| {
            let mut r = rho;
            r[j] += d;
            r
        };
        let (col, dband) = match (lo_ok, hi_ok) {
            (true, true) => {
                let (gp, tp) = eval(shifted(step))?;
                let (gm, tm) = eval(shifted(-step))?;
                ((gp - gm) / (2.0 * step), (tp - tm) / (2.0 * step))
            }
            (false, true) => {
                let (gp, tp) = eval(shifted(step))?;
                ((gp - &g0) / step, (tp - band_t) / step)
            }
            (true, false) => {
                let (gm, tm) = eval(shifted(-step))?;
                ((&g0 - gm) / step, (band_t - tm) / step)
            }
            (false, false) => continue,
        };
        g.set_column(j, &col);
        band_grad[j] = dband;
    }
    // Analytic derivative in b.
    let t = p.unit_response(rho)?;
    let (_, mt) = p.linear_parts(&p.residualize(&t));
    for k in 0..7 {
        g[(k, 3)] = -mt[k];
    }
    g[(7, 3)] = -rho[2] / (b * b);
    Ok(Jacobian {
        g,
        free,
        band_t,
        band_grad,
    })
}

/// Covariance of the free second-step parameters with Windmeijer's
/// correction for the estimated weight matrix:
/// V₂ + D·V₂ + V₂·D' + D·V₁·D', where V₁ is the first-step sandwich and
/// column j of D is (G'W₂G)⁻¹G'W₂(∂Ω/∂φ_j)W₂ḡ(φ̂₂), the derivative of Ω
/// taken at the first-step estimate.
#[allow(clippy::too_many_arguments)]
fn windmeijer(
    p: &GmmProblem,
    g: &DMatrix<f64>,
    free: &[usize],
    w1: &DMatrix<f64>,
    omega1: &DMatrix<f64>,
    w2: &DMatrix<f64>,
    rho: [[f64; 3]; 2],
    b: [f64; 2],
    gbar: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = p.ds.n() as f64;
    let h2 = pinv_sym(&(g.transpose() * w2 * g), 1e-12);
    let v2 = &h2 / n;
    let h1 = pinv_sym(&(g.transpose() * w1 * g), 1e-12);
    let v1 = &h1 * g.transpose() * w1 * omega1 * w1 * g * &h1 / n;

    let [rho1, rho2] = rho;
    let omega_at = |r: [f64; 3], bb: f64| -> Result<DMatrix<f64>> {
        let t = p.residualize(&p.unit_response(r)?);
        Ok(p.moment_covariance(&p.breakdown(&t, r[2], bb)))
    };
    let admissible = |r: [f64; 3], bb: f64| {
        r[0] >= 0.0 && r[1] >= 0.0 && r[2] * r[2] <= 4.0 * r[0] * r[1] && bb > 0.0
    };
    let phi1 = [rho1[0], rho1[1], rho1[2], b[0]];
    let scale = [
        rho1[0].max(rho2[0]),
        rho1[1].max(rho2[1]),
        2.0 * (rho1[0] * rho1[1]).sqrt(),
        b[0],
    ];
    let shifted = |j: usize, d: f64| {
        let mut f = phi1;
        f[j] += d;
        ([f[0], f[1], f[2]], f[3])
    };
    let right = h2.clone() * g.transpose() * w2;
    let tail = w2 * gbar;
    let mut d = DMatrix::<f64>::zeros(free.len(), free.len());
    for (c, &j) in free.iter().enumerate() {
        let step = 1e-3 * scale[j];
        if !(step > 0.0) {
            continue;
        }
        let (up, dn) = (shifted(j, step), shifted(j, -step));
        let domega = match (admissible(up.0, up.1), admissible(dn.0, dn.1)) {
            (true, true) => (omega_at(up.0, up.1)? - omega_at(dn.0, dn.1)?) / (2.0 * step),
            (true, false) => (omega_at(up.0, up.1)? - omega1) / step,
            (false, true) => (omega1 - omega_at(dn.0, dn.1)?) / step,
            (false, false) => continue,
        };
        d.set_column(c, &(&right * domega * &tail));
    }
    Ok(&v2 + &d * &v2 + &v2 * d.transpose() + &d * v1 * d.transpose())
}

/// Two-step GMM with identity then HAC-optimal weighting. Standard errors
/// come from (G'W₂G)⁻¹/N with Windmeijer's finite-sample correction, with
/// parameters at a bound held fixed.
pub fn full_gmm(
    ds: &Dataset,
    hac: &HacSpec,
    opts: &GmmOptions,
    ctx: &EstimatorContext,
) -> Result<EstimateReport> {
    let p = GmmProblem::new(ds, hac, opts, ctx)?;
    let n = ds.n() as f64;
    let mut rep = EstimateReport::new("full_gmm", ctx);
    rep.warnings.extend(p.warnings.iter().cloned());

    let starts: Vec<[f64; 3]> = opts.starts.iter().map(GmmProblem::u_from_theta).collect();
    let w1 = DMatrix::<f64>::identity(N_MOMENTS, N_MOMENTS);
    let (u1, b1, _, _, e1) = p.minimize(&starts, &w1);
    if !b1.is_finite() {
        return Err(Error::Numerical(
            "first-step GMM failed to evaluate the model".into(),
        ));
    }
    let rho1 = GmmProblem::rho_from_u(&u1);
    let t1 = p.residualize(&p.unit_response(rho1)?);
    let omega1 = p.moment_covariance(&p.breakdown(&t1, rho1[2], b1));
    let w2 = floored_inverse(&omega1, opts.weight_floor);
    let u1a: [f64; 3] = [u1[0], u1[1], u1[2]];
    let (u2, b, value, converged, e2) = p.minimize(&[u1a], &w2);
    if !b.is_finite() {
        return Err(Error::Numerical(
            "second-step GMM failed to evaluate the model".into(),
        ));
    }
    if !converged {
        rep.warnings
            .push("optimizer stopped at its evaluation cap".into());
    }
    let rho = GmmProblem::rho_from_u(&u2);
    let tr = p.residualize(&p.unit_response(rho)?);
    let m = p.breakdown(&tr, rho[2], b);
    let omega = p.moment_covariance(&m);
    let w = floored_inverse(&omega, opts.weight_floor);

    let jac = jacobian(&p, rho, b)?;
    let free: Vec<usize> = (0..4).filter(|&j| jac.free[j]).collect();
    let gf = select_columns(&jac.g, &free);
    let vf = windmeijer(
        &p,
        &gf,
        &free,
        &w1,
        &omega1,
        &w2,
        [rho1, rho],
        [b1, b],
        &m.mean,
    )?;
    let mut v_phi = DMatrix::<f64>::zeros(4, 4);
    for (a, &i) in free.iter().enumerate() {
        for (c, &j) in free.iter().enumerate() {
            v_phi[(i, j)] = vf[(a, c)];
        }
    }
    for (j, name) in ["nu_s", "nu_n", "lambda"].iter().enumerate() {
        if !jac.free[j] {
            rep.warnings
                .push(format!("{name} at its bound; held fixed for inference"));
        }
    }

    let theta = StructuralParams::new(rho[0] / b, rho[1] / b, 1.0 / b, rho[2] / b);
    let bb = b * b;
    let jh = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0 / b,
            0.0,
            0.0,
            -rho[0] / bb,
            0.0,
            1.0 / b,
            0.0,
            -rho[1] / bb,
            0.0,
            0.0,
            0.0,
            -1.0 / bb,
            0.0,
            0.0,
            1.0 / b,
            -rho[2] / bb,
        ],
    );
    let v_theta = &jh * &v_phi * jh.transpose();
    let mut cov = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            cov[i][j] = v_theta[(i, j)];
        }
    }
    let se = [0, 1, 2, 3].map(|i| v_theta[(i, i)].max(0.0).sqrt());
    rep.structural = Some(StructuralEstimate {
        params: theta,
        se,
        cov,
    });
    let names: Vec<String> = ["nu_s", "nu_n", "kappa", "lambda"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    rep.set_coefficients(&names, &theta.as_array(), &v_theta);

    let c = ctx.effect_scale;
    rep.direct = Estimate::new(c * b, c * v_phi[(3, 3)].max(0.0).sqrt());
    if p.s_band > 0.0 {
        let grad = DVector::from_row_slice(&[
            c * b * jac.band_grad[0] / p.s_band,
            c * b * jac.band_grad[1] / p.s_band,
            c * b * jac.band_grad[2] / p.s_band,
            c * jac.band_t / p.s_band,
        ]);
        let var = (grad.transpose() * &v_phi * &grad)[(0, 0)];
        rep.total_border = Estimate::new(c * b * jac.band_t / p.s_band, var.max(0.0).sqrt());
    } else {
        rep.warnings
            .push("no exposed units in the border band".into());
    }

    let j_stat = n * (m.mean.transpose() * &w * &m.mean)[(0, 0)];
    let dof = (N_MOMENTS - 4) as f64;
    rep.tests.push(TestStatistic {
        name: "hansen_j".into(),
        statistic: j_stat,
        dof,
        p_value: chi2_sf(j_stat, dof),
    });
    rep.diagnostics.insert("objective".into(), value);
    rep.diagnostics
        .insert("evaluations_step1".into(), e1 as f64);
    rep.diagnostics
        .insert("evaluations_step2".into(), e2 as f64);
    rep.diagnostics
        .insert("converged".into(), f64::from(u8::from(converged)));
    rep.diagnostics
        .insert("mutual_information".into(), p.mutual_information());
    rep.diagnostics.insert("step1_kappa".into(), 1.0 / b1);
    Ok(rep)
}
