use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::SpatialDomain;

/// A scalar field sampled on the nodes of a regular (x¹, x², α) lattice.
///
/// Values are stored with α varying fastest, then x², then x¹.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub domain: SpatialDomain,
    pub values: Vec<f64>,
}

/// Linear interpolation stencil along one axis: value = (1-w)·f[i0] + w·f[i1].
#[derive(Debug, Clone, Copy)]
struct AxisStencil {
    i0: usize,
    i1: usize,
    w: f64,
}

impl GridField {
    pub fn new(domain: SpatialDomain, values: Vec<f64>) -> Result<Self> {
        domain.validate()?;
        let n: usize = domain.grid.iter().product();
        if values.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} values for a lattice of {n} nodes",
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at node {k}")));
        }
        Ok(Self { domain, values })
    }

    pub fn constant(domain: SpatialDomain, c: f64) -> Self {
        let n = domain.grid.iter().product();
        Self {
            domain,
            values: vec![c; n],
        }
    }

    pub fn zeros(domain: SpatialDomain) -> Self {
        Self::constant(domain, 0.0)
    }

    /// Samples `f(x1, x2, alpha)` at every node.
    pub fn from_fn(domain: SpatialDomain, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let [nx, ny, na] = domain.grid;
        let mut values = Vec::with_capacity(nx * ny * na);
        for i in 0..nx {
            let x1 = domain.node(0, i);
            for j in 0..ny {
                let x2 = domain.node(1, j);
                for k in 0..na {
                    values.push(f(x1, x2, domain.node(2, k)));
                }
            }
        }
        Self { domain, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let [_, ny, na] = self.domain.grid;
        (i * ny + j) * na + k
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn same_lattice(&self, other: &GridField) -> bool {
        self.domain == other.domain
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &GridField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn scaled(&self, c: f64) -> GridField {
        GridField {
            domain: self.domain,
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    pub fn plus(&self, other: &GridField) -> GridField {
        GridField {
            domain: self.domain,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Trapezoidal integral over the non-collapsed axes.
    pub fn integral(&self) -> f64 {
        let [nx, ny, na] = self.domain.grid;
        let h = self.domain.spacing();
        let w = |n: usize, i: usize, h: f64| {
            if n == 1 {
                1.0
            } else if i == 0 || i == n - 1 {
                0.5 * h
            } else {
                h
            }
        };
        let mut s = 0.0;
        for i in 0..nx {
            for j in 0..ny {
                let wij = w(nx, i, h[0]) * w(ny, j, h[1]);
                for k in 0..na {
                    s += wij * w(na, k, h[2]) * self.at(i, j, k);
                }
            }
        }
        s
    }

    fn stencil(&self, axis: usize, v: f64) -> AxisStencil {
        let n = self.domain.grid[axis];
        if n == 1 {
            return AxisStencil {
                i0: 0,
                i1: 0,
                w: 0.0,
            };
        }
        let lo = self.domain.ranges()[axis][0];
        let h = self.domain.spacing()[axis];
        let s = ((v - lo) / h).clamp(0.0, (n - 1) as f64);
        let i0 = (s.floor() as usize).min(n - 2);
        AxisStencil {
            i0,
            i1: i0 + 1,
            w: s - i0 as f64,
        }
    }

    /// Stencil along x¹ that only uses nodes on the same side of `border` as
    /// `v` (strictly above or not), extrapolating linearly when the enclosing
    /// cell straddles the border.
    fn sided_stencil(&self, v: f64, border: f64) -> AxisStencil {
        let st = self.stencil(0, v);
        let n = self.domain.grid[0];
        if n < 4 {
            return st;
        }
        let x = |i: usize| self.domain.node(0, i);
        let above = v > border;
        let same = |i: usize| (x(i) > border) == above;
        if same(st.i0) && same(st.i1) {
            return st;
        }
        let h = self.domain.spacing()[0];
        let (i0, i1) = if above {
            (st.i1, st.i1 + 1)
        } else {
            match st.i0.checked_sub(1) {
                Some(i) => (i, st.i0),
                None => return st,
            }
        };
        if i1 >= n || !same(i0) || !same(i1) {
            return st;
        }
        AxisStencil {
            i0,
            i1,
            w: (v - x(i0)) / h,
        }
    }

    fn eval_stencils(&self, s: [AxisStencil; 3]) -> f64 {
        let mut acc = 0.0;
        for (a, wa) in [(s[0].i0, 1.0 - s[0].w), (s[0].i1, s[0].w)] {
            if wa == 0.0 {
                continue;
            }
            for (b, wb) in [(s[1].i0, 1.0 - s[1].w), (s[1].i1, s[1].w)] {
                if wb == 0.0 {
                    continue;
                }
                for (c, wc) in [(s[2].i0, 1.0 - s[2].w), (s[2].i1, s[2].w)] {
                    if wc == 0.0 {
                        continue;
                    }
                    acc += wa * wb * wc * self.at(a, b, c);
                }
            }
        }
        acc
    }

    /// Trilinear interpolation, clamped to the domain.
    pub fn interpolate(&self, p: [f64; 3]) -> f64 {
        self.eval_stencils([
            self.stencil(0, p[0]),
            self.stencil(1, p[1]),
            self.stencil(2, p[2]),
        ])
    }

    /// Trilinear interpolation that never mixes nodes from opposite sides of
    /// the x¹ = `border` line, so fields with a jump there are reproduced
    /// without smearing.
    pub fn interpolate_sided(&self, p: [f64; 3], border: f64) -> f64 {
        self.eval_stencils([
            self.sided_stencil(p[0], border),
            self.stencil(1, p[1]),
            self.stencil(2, p[2]),
        ])
    }
}

impl SpatialDomain {
    /// Coordinate of node `i` along `axis`; the lower end for a collapsed axis.
    #[inline]
    pub fn node(&self, axis: usize, i: usize) -> f64 {
        let r = self.ranges()[axis];
        if self.grid[axis] == 1 {
            r[0]
        } else {
            r[0] + (r[1] - r[0]) * i as f64 / (self.grid[axis] - 1) as f64
        }
    }
}
