use serde::{Deserialize, Serialize};

use super::grid::GridField;
use crate::error::{Error, Result};
use crate::types::{SpatialDomain, StructuralParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Reflecting faces, imposed by mirroring the first interior node.
    #[default]
    ZeroFlux,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub boundary: Boundary,
    /// Sup-norm residual threshold, used by both the linear and Picard loops.
    pub tolerance: f64,
    /// Iteration cap of the Krylov solver.
    pub max_iterations: usize,
    pub picard_damping: f64,
    pub picard_max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            boundary: Boundary::ZeroFlux,
            tolerance: 1e-10,
            max_iterations: 20_000,
            picard_damping: 1.0,
            picard_max_iterations: 200,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 || self.picard_max_iterations == 0 {
            return Err(Error::InvalidInput(
                "solver tolerance and iteration caps must be positive".into(),
            ));
        }
        if !(self.picard_damping > 0.0 && self.picard_damping <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "picard_damping {} outside (0, 1]",
                self.picard_damping
            )));
        }
        Ok(())
    }
}

/// Discrete generator ν_s(∂²₁+∂²₂) + ν_n∂²_α + λ∂²_{x¹α} with mirrored ghosts.
#[derive(Debug, Clone)]
pub(crate) struct Operator {
    n: [usize; 3],
    c: [f64; 3],
    cross: f64,
    h: [f64; 3],
}

#[inline]
fn nbrs(i: usize, n: usize) -> (usize, usize) {
    let im = if i == 0 { 1 } else { i - 1 };
    let ip = if i + 1 == n { n - 2 } else { i + 1 };
    (im, ip)
}

impl Operator {
    pub(crate) fn new(p: &StructuralParams, d: &SpatialDomain) -> Self {
        let h = d.spacing();
        let inv2 = |a: usize| {
            if d.grid[a] > 1 {
                1.0 / (h[a] * h[a])
            } else {
                0.0
            }
        };
        let cross = if d.grid[0] > 1 && d.grid[2] > 1 {
            p.lambda / (4.0 * h[0] * h[2])
        } else {
            0.0
        };
        Self {
            n: d.grid,
            c: [p.nu_s * inv2(0), p.nu_s * inv2(1), p.nu_n * inv2(2)],
            cross,
            h,
        }
    }

    pub(crate) fn without_cross(&self) -> Self {
        Self {
            cross: 0.0,
            ..self.clone()
        }
    }

    /// out = L u
    pub(crate) fn apply(&self, u: &[f64], out: &mut [f64]) {
        let [nx, ny, na] = self.n;
        let [cx, cy, ca] = self.c;
        for i in 0..nx {
            let (im, ip) = if nx > 1 { nbrs(i, nx) } else { (i, i) };
            for j in 0..ny {
                let (jm, jp) = if ny > 1 { nbrs(j, ny) } else { (j, j) };
                let row = (i * ny + j) * na;
                let row_im = (im * ny + j) * na;
                let row_ip = (ip * ny + j) * na;
                let row_jm = (i * ny + jm) * na;
                let row_jp = (i * ny + jp) * na;
                for k in 0..na {
                    let (km, kp) = if na > 1 { nbrs(k, na) } else { (k, k) };
                    let c0 = u[row + k];
                    let mut v = cx * (u[row_ip + k] + u[row_im + k] - 2.0 * c0)
                        + cy * (u[row_jp + k] + u[row_jm + k] - 2.0 * c0)
                        + ca * (u[row + kp] + u[row + km] - 2.0 * c0);
                    if self.cross != 0.0 {
                        v += self.cross
                            * (u[row_ip + kp] - u[row_ip + km] - u[row_im + kp] + u[row_im + km]);
                    }
                    out[row + k] = v;
                }
            }
        }
    }

    /// Central first derivatives along x¹ and α (zero on reflecting faces).
    pub(crate) fn gradient_product(&self, u: &[f64], out: &mut [f64]) {
        let [nx, ny, na] = self.n;
        if nx < 2 || na < 2 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let (hx, ha) = (self.h[0], self.h[2]);
        for i in 0..nx {
            let (im, ip) = nbrs(i, nx);
            for j in 0..ny {
                let row = (i * ny + j) * na;
                let row_im = (im * ny + j) * na;
                let row_ip = (ip * ny + j) * na;
                for k in 0..na {
                    let (km, kp) = nbrs(k, na);
                    let dx = (u[row_ip + k] - u[row_im + k]) / (2.0 * hx);
                    let da = (u[row + kp] - u[row + km]) / (2.0 * ha);
                    out[row + k] = dx * da;
                }
            }
        }
    }

    fn diagonal(&self) -> f64 {
        2.0 * (self.c[0] + self.c[1] + self.c[2])
    }
}

/// LU factors of c0·I − L in band storage, without pivoting. Used when the
/// lattice bandwidth is small enough for a direct solve to beat iteration.
pub(crate) struct BandedLu {
    n: usize,
    bw: usize,
    a: Vec<f64>,
}

/// Work bound n·bw² under which [`BandedLu`] is preferred.
const BANDED_WORK_LIMIT: f64 = 4e7;

impl BandedLu {
    fn bandwidth(op: &Operator) -> usize {
        let [nx, ny, na] = op.n;
        if nx > 1 {
            ny * na + usize::from(op.cross != 0.0)
        } else if ny > 1 {
            na
        } else {
            1
        }
    }

    pub(crate) fn worthwhile(op: &Operator) -> bool {
        let n = op.n.iter().product::<usize>() as f64;
        let bw = Self::bandwidth(op) as f64;
        n * bw * bw <= BANDED_WORK_LIMIT
    }

    pub(crate) fn new(op: &Operator, c0: f64) -> Result<Self> {
        let [nx, ny, na] = op.n;
        let n = nx * ny * na;
        let bw = Self::bandwidth(op);
        let w = 2 * bw + 1;
        let mut a = vec![0.0; n * w];
        let [cx, cy, ca] = op.c;
        let idx = |i: usize, j: usize, k: usize| (i * ny + j) * na + k;
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..na {
                    let r = idx(i, j, k);
                    let mut put = |c: usize, v: f64| a[r * w + bw + c - r] += v;
                    put(r, c0 + op.diagonal());
                    if nx > 1 {
                        let (im, ip) = nbrs(i, nx);
                        put(idx(ip, j, k), -cx);
                        put(idx(im, j, k), -cx);
                    }
                    if ny > 1 {
                        let (jm, jp) = nbrs(j, ny);
                        put(idx(i, jp, k), -cy);
                        put(idx(i, jm, k), -cy);
                    }
                    if na > 1 {
                        let (km, kp) = nbrs(k, na);
                        put(idx(i, j, kp), -ca);
                        put(idx(i, j, km), -ca);
                        if op.cross != 0.0 && nx > 1 {
                            let (im, ip) = nbrs(i, nx);
                            put(idx(ip, j, kp), -op.cross);
                            put(idx(ip, j, km), op.cross);
                            put(idx(im, j, kp), op.cross);
                            put(idx(im, j, km), -op.cross);
                        }
                    }
                }
            }
        }
        for k in 0..n {
            let piv = a[k * w + bw];
            if !(piv.abs() > 0.0) || !piv.is_finite() {
                return Err(Error::Numerical(format!("zero pivot at row {k}")));
            }
            let end = (k + bw + 1).min(n);
            for r in k + 1..end {
                let l = a[r * w + bw + k - r] / piv;
                if l == 0.0 {
                    continue;
                }
                a[r * w + bw + k - r] = l;
                for c in k + 1..end {
                    a[r * w + bw + c - r] -= l * a[k * w + bw + c - k];
                }
            }
        }
        Ok(Self { n, bw, a })
    }

    pub(crate) fn solve(&self, x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, 2 * self.bw + 1);
        for r in 0..n {
            let lo = r.saturating_sub(bw);
            let mut v = x[r];
            for c in lo..r {
                v -= self.a[r * w + bw + c - r] * x[c];
            }
            x[r] = v;
        }
        for r in (0..n).rev() {
            let hi = (r + bw + 1).min(n);
            let mut v = x[r];
            for c in r + 1..hi {
                v -= self.a[r * w + bw + c - r] * x[c];
            }
            x[r] = v / self.a[r * w + bw];
        }
    }
}

/// Solves (c0·I − L)x = b directly when the band is narrow, polishing with
/// BiCGSTAB if the direct residual misses the tolerance; otherwise iterates.
fn solve_linear(
    op: &Operator,
    lu: Option<&BandedLu>,
    c0: f64,
    b: &[f64],
    x: &mut [f64],
    opts: &SolverOptions,
) -> Result<usize> {
    if let Some(lu) = lu {
        let mut y = b.to_vec();
        lu.solve(&mut y);
        if y.iter().all(|v| v.is_finite()) {
            x.copy_from_slice(&y);
        }
    }
    solve_shifted(op, c0, b, x, opts.tolerance, opts.max_iterations)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sup(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// r = b − (c0·x − L x)
fn residual(op: &Operator, c0: f64, x: &[f64], b: &[f64], r: &mut [f64], work: &mut [f64]) {
    op.apply(x, work);
    for k in 0..x.len() {
        r[k] = b[k] - (c0 * x[k] - work[k]);
    }
}

/// Solves (c0·I − L) x = b by Jacobi-preconditioned BiCGSTAB, starting from
/// `x`. Returns the iteration count.
pub(crate) fn solve_shifted(
    op: &Operator,
    c0: f64,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<usize> {
    let n = b.len();
    let dinv = 1.0 / (c0 + op.diagonal());
    let mut r = vec![0.0; n];
    let mut work = vec![0.0; n];
    residual(op, c0, x, b, &mut r, &mut work);
    if sup(&r) <= tol {
        return Ok(0);
    }
    let mut rhat = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut t = vec![0.0; n];
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let apply_a = |u: &[f64], out: &mut [f64]| {
        op.apply(u, out);
        for k in 0..u.len() {
            out[k] = c0 * u[k] - out[k];
        }
    };
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let rho_new = dot(&rhat, &r);
        if rho_new == 0.0 || !rho_new.is_finite() {
            residual(op, c0, x, b, &mut r, &mut work);
            if sup(&r) <= tol {
                return Ok(it);
            }
            rhat.copy_from_slice(&r);
            p.iter_mut().for_each(|e| *e = 0.0);
            v.iter_mut().for_each(|e| *e = 0.0);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for k in 0..n {
            p[k] = r[k] + beta * (p[k] - omega * v[k]);
            y[k] = dinv * p[k];
        }
        apply_a(&y, &mut v);
        let rv = dot(&rhat, &v);
        if rv == 0.0 {
            rho = 0.0;
            continue;
        }
        alpha = rho / rv;
        for k in 0..n {
            s[k] = r[k] - alpha * v[k];
        }
        if sup(&s) <= tol {
            for k in 0..n {
                x[k] += alpha * y[k];
            }
            residual(op, c0, x, b, &mut r, &mut work);
            if sup(&r) <= tol {
                return Ok(it);
            }
            rhat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            p.iter_mut().for_each(|e| *e = 0.0);
            v.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        for k in 0..n {
            z[k] = dinv * s[k];
        }
        apply_a(&z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for k in 0..n {
            x[k] += alpha * y[k] + omega * z[k];
            r[k] = s[k] - omega * t[k];
        }
        if sup(&r) <= tol || omega == 0.0 {
            residual(op, c0, x, b, &mut r, &mut work);
            if sup(&r) <= tol {
                return Ok(it);
            }
            rhat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            p.iter_mut().for_each(|e| *e = 0.0);
            v.iter_mut().for_each(|e| *e = 0.0);
        }
    }
    residual(op, c0, x, b, &mut r, &mut work);
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: sup(&r),
    })
}

fn check_inputs(params: &StructuralParams, s: &GridField, opts: &SolverOptions) -> Result<()> {
    params.ensure_valid()?;
    opts.validate()?;
    s.domain.validate()
}

/// Steady state of the linear master equation: (κ − L)τ = S.
pub fn steady_state_linear(
    params: &StructuralParams,
    s: &GridField,
    opts: &SolverOptions,
) -> Result<GridField> {
    steady_state_linear_from(params, s, opts, None)
}

/// As [`steady_state_linear`], starting the iteration from `guess`.
pub fn steady_state_linear_from(
    params: &StructuralParams,
    s: &GridField,
    opts: &SolverOptions,
    guess: Option<&GridField>,
) -> Result<GridField> {
    check_inputs(params, s, opts)?;
    let op = Operator::new(params, &s.domain);
    let mut x = match guess {
        Some(g) if g.same_lattice(s) => g.values.clone(),
        _ => s.values.iter().map(|v| v / params.kappa).collect(),
    };
    let lu = if BandedLu::worthwhile(&op) {
        BandedLu::new(&op, params.kappa).ok()
    } else {
        None
    };
    solve_linear(&op, lu.as_ref(), params.kappa, &s.values, &mut x, opts)?;
    Ok(GridField {
        domain: s.domain,
        values: x,
    })
}

/// Sup-norm of ν_s∇²τ + ν_n∂²_ατ + λ∂²_{x¹α}τ − κτ + S.
pub fn linear_residual(params: &StructuralParams, tau: &GridField, s: &GridField) -> f64 {
    let op = Operator::new(params, &tau.domain);
    let mut lu = vec![0.0; tau.len()];
    op.apply(&tau.values, &mut lu);
    (0..tau.len()).fold(0.0, |m, k| {
        m.max((lu[k] - params.kappa * tau.values[k] + s.values[k]).abs())
    })
}

/// Sup-norm of ν_s∇²τ + ν_n∂²_ατ + λ·∂τ/∂x¹·∂τ/∂α − κτ + S.
pub fn dgp_residual(params: &StructuralParams, tau: &GridField, s: &GridField) -> f64 {
    let op = Operator::new(params, &tau.domain);
    let mut lu = vec![0.0; tau.len()];
    let mut g = vec![0.0; tau.len()];
    op.without_cross().apply(&tau.values, &mut lu);
    op.gradient_product(&tau.values, &mut g);
    (0..tau.len()).fold(0.0, |m, k| {
        m.max((lu[k] + params.lambda * g[k] - params.kappa * tau.values[k] + s.values[k]).abs())
    })
}

/// Outcome of the Picard iteration.
#[derive(Debug, Clone)]
pub struct DgpSolution {
    pub tau: GridField,
    pub iterations: usize,
    pub residual: f64,
}

/// Steady state of the variant whose interaction term is the product of first
/// derivatives λ·∂τ/∂x¹·∂τ/∂α, by damped Picard iteration on that term.
pub fn steady_state_dgp(
    params: &StructuralParams,
    s: &GridField,
    opts: &SolverOptions,
) -> Result<GridField> {
    steady_state_dgp_detailed(params, s, opts).map(|d| d.tau)
}

pub fn steady_state_dgp_detailed(
    params: &StructuralParams,
    s: &GridField,
    opts: &SolverOptions,
) -> Result<DgpSolution> {
    check_inputs(params, s, opts)?;
    let op0 = Operator::new(params, &s.domain).without_cross();
    let op_full = Operator::new(params, &s.domain);
    let n = s.len();
    let kappa = params.kappa;
    let mut tau: Vec<f64> = s.values.iter().map(|v| v / kappa).collect();
    solve_shifted(
        &op0,
        kappa,
        &s.values,
        &mut tau,
        opts.tolerance,
        opts.max_iterations,
    )?;
    let mut g = vec![0.0; n];
    let mut lu = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let nonlinear_residual = |tau: &[f64], g: &mut [f64], lu: &mut [f64]| {
        op0.apply(tau, lu);
        op_full.gradient_product(tau, g);
        (0..n).fold(0.0f64, |m, k| {
            m.max((lu[k] + params.lambda * g[k] - kappa * tau[k] + s.values[k]).abs())
        })
    };
    let mut res = nonlinear_residual(&tau, &mut g, &mut lu);
    let mut growth = 0;
    let mut it = 0;
    while res > opts.tolerance {
        if it == opts.picard_max_iterations {
            return Err(Error::NonConvergence {
                iterations: it,
                residual: res,
            });
        }
        it += 1;
        for k in 0..n {
            rhs[k] = s.values[k] + params.lambda * g[k];
        }
        let mut next = tau.clone();
        solve_shifted(
            &op0,
            kappa,
            &rhs,
            &mut next,
            0.1 * opts.tolerance,
            opts.max_iterations,
        )?;
        let w = opts.picard_damping;
        for k in 0..n {
            tau[k] = (1.0 - w) * tau[k] + w * next[k];
        }
        let new_res = nonlinear_residual(&tau, &mut g, &mut lu);
        if !new_res.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                residual: new_res,
            });
        }
        growth = if new_res > res { growth + 1 } else { 0 };
        if growth >= 3 {
            return Err(Error::Divergence {
                iteration: it,
                residual: new_res,
            });
        }
        res = new_res;
    }
    Ok(DgpSolution {
        tau: GridField {
            domain: s.domain,
            values: tau,
        },
        iterations: it,
        residual: res,
    })
}

/// Source term of a transient run.
#[derive(Debug, Clone, Copy)]
pub enum TimeSource<'a> {
    Constant(&'a GridField),
    /// Zero before `on_at`, `field` from then on.
    Switched {
        field: &'a GridField,
        on_at: f64,
    },
    /// `fields[k]` applies on [k·step, (k+1)·step); the last one persists.
    Sequence {
        fields: &'a [GridField],
        step: f64,
    },
}

impl<'a> TimeSource<'a> {
    fn at(&self, t: f64) -> Option<&'a GridField> {
        match *self {
            TimeSource::Constant(f) => Some(f),
            TimeSource::Switched { field, on_at } => (t >= on_at - 1e-12).then_some(field),
            TimeSource::Sequence { fields, step } => {
                let k = ((t / step + 1e-9).floor().max(0.0) as usize)
                    .min(fields.len().saturating_sub(1));
                fields.get(k)
            }
        }
    }
}

/// Implicit-Euler integration of ∂τ/∂t = Lτ − κτ + S from `tau0` over
/// [0, t_end]. Records the state at t = 0, every `record_every` steps, and at
/// the final step.
pub fn transient(
    params: &StructuralParams,
    tau0: &GridField,
    source: TimeSource<'_>,
    dt: f64,
    t_end: f64,
    opts: &SolverOptions,
    record_every: usize,
) -> Result<Vec<(f64, GridField)>> {
    check_inputs(params, tau0, opts)?;
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "need dt > 0 and t_end >= 0, got {dt}, {t_end}"
        )));
    }
    if params.kappa * dt >= 1.0 {
        return Err(Error::InvalidInput(format!(
            "kappa·dt = {} must be < 1",
            params.kappa * dt
        )));
    }
    let probe = source.at(t_end).or(source.at(0.0));
    if let Some(f) = probe {
        if !f.same_lattice(tau0) {
            return Err(Error::InvalidInput(
                "source and initial field lattices differ".into(),
            ));
        }
    }
    let steps = (t_end / dt).round() as usize;
    let every = record_every.max(1);
    let op = Operator::new(params, &tau0.domain);
    let c0 = 1.0 / dt + params.kappa;
    let lu = if BandedLu::worthwhile(&op) {
        BandedLu::new(&op, c0).ok()
    } else {
        None
    };
    let scale = probe.map_or(0.0, |f| f.sup_norm() / params.kappa);
    let reference = tau0.sup_norm().max(scale).max(f64::MIN_POSITIVE);
    let mut u = tau0.values.clone();
    let mut rhs = vec![0.0; u.len()];
    let mut out = vec![(0.0, tau0.clone())];
    for step in 1..=steps {
        let t = (step - 1) as f64 * dt;
        let src = source.at(t);
        for k in 0..u.len() {
            rhs[k] = u[k] / dt + src.map_or(0.0, |f| f.values[k]);
        }
        solve_linear(&op, lu.as_ref(), c0, &rhs, &mut u, opts)?;
        let norm = sup(&u);
        if !norm.is_finite() || norm > 1e6 * reference {
            return Err(Error::Instability { step, norm });
        }
        if step % every == 0 || step == steps {
            out.push((
                step as f64 * dt,
                GridField {
                    domain: tau0.domain,
                    values: u.clone(),
                },
            ));
        }
    }
    Ok(out)
}
