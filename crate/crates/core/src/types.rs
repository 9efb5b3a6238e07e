//! Domain types shared by every module.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Structural parameters of the master equation.
///
/// `nu_s` is the spatial diffusivity (square miles per quarter), `nu_n` the
/// network diffusivity in market-position units, `kappa` the decay rate per
/// quarter and `lambda` the coefficient on the mixed spatial/market derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuralParams {
    pub nu_s: f64,
    pub nu_n: f64,
    pub kappa: f64,
    pub lambda: f64,
}

/// A single violated parameter invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    NegativeNuS,
    NegativeNuN,
    NonPositiveKappa,
    NonFinite,
    LambdaExceedsBound,
    LambdaWithDegenerateDiffusion,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Violation::NegativeNuS => "nu_s < 0",
            Violation::NegativeNuN => "nu_n < 0",
            Violation::NonPositiveKappa => "kappa <= 0",
            Violation::NonFinite => "non-finite parameter",
            Violation::LambdaExceedsBound => "lambda² > 4·nu_s·nu_n",
            Violation::LambdaWithDegenerateDiffusion => "lambda != 0 with a zero diffusivity",
        };
        f.write_str(s)
    }
}

impl StructuralParams {
    pub const fn new(nu_s: f64, nu_n: f64, kappa: f64, lambda: f64) -> Self {
        Self {
            nu_s,
            nu_n,
            kappa,
            lambda,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.nu_s, self.nu_n, self.kappa, self.lambda]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Every violated invariant; empty when the parameters are admissible.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if !self.as_array().iter().all(|x| x.is_finite()) {
            v.push(Violation::NonFinite);
            return v;
        }
        if self.nu_s < 0.0 {
            v.push(Violation::NegativeNuS);
        }
        if self.nu_n < 0.0 {
            v.push(Violation::NegativeNuN);
        }
        if self.kappa <= 0.0 {
            v.push(Violation::NonPositiveKappa);
        }
        if self.nu_s == 0.0 || self.nu_n == 0.0 {
            if self.lambda != 0.0 {
                v.push(Violation::LambdaWithDegenerateDiffusion);
            }
        } else if self.lambda * self.lambda > 4.0 * self.nu_s * self.nu_n {
            v.push(Violation::LambdaExceedsBound);
        }
        v
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// `Ok(())` or an `InvalidParams` error listing every violation.
    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            let msg: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            Err(Error::InvalidParams(msg.join("; ")))
        }
    }

    /// Diffusion matrix over (x¹, x², α) whose half-trace pairing gives the
    /// generator ν_s Δ_x + ν_n ∂²_α + λ ∂²_{x¹α}.
    pub fn diffusion_matrix(&self) -> [[f64; 3]; 3] {
        [
            [2.0 * self.nu_s, 0.0, self.lambda],
            [0.0, 2.0 * self.nu_s, 0.0],
            [self.lambda, 0.0, 2.0 * self.nu_n],
        ]
    }
}

/// The four simulation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigId {
    NoSpillovers,
    SpatialOnly,
    NetworkOnly,
    FullModel,
}

impl ConfigId {
    pub const ALL: [ConfigId; 4] = [
        ConfigId::NoSpillovers,
        ConfigId::SpatialOnly,
        ConfigId::NetworkOnly,
        ConfigId::FullModel,
    ];

    /// Case number, 1 through 4.
    pub fn case_number(self) -> u8 {
        match self {
            ConfigId::NoSpillovers => 1,
            ConfigId::SpatialOnly => 2,
            ConfigId::NetworkOnly => 3,
            ConfigId::FullModel => 4,
        }
    }

    pub fn from_case_number(n: u8) -> Option<Self> {
        Self::ALL.get(n.checked_sub(1)? as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConfigId::NoSpillovers => "no_spillovers",
            ConfigId::SpatialOnly => "spatial_only",
            ConfigId::NetworkOnly => "network_only",
            ConfigId::FullModel => "full_model",
        }
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ConfigId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace('-', "_");
        if let Ok(n) = t
            .trim_start_matches("case")
            .trim_start_matches('_')
            .parse::<u8>()
        {
            if let Some(c) = Self::from_case_number(n) {
                return Ok(c);
            }
        }
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == t)
            .ok_or_else(|| Error::Parse(format!("unknown configuration '{s}'")))
    }
}

/// Parameter values of each configuration.
pub fn config_params(id: ConfigId) -> StructuralParams {
    match id {
        ConfigId::NoSpillovers => StructuralParams::new(0.0, 0.0, 0.25, 0.0),
        ConfigId::SpatialOnly => StructuralParams::new(100.0, 0.0, 0.25, 0.0),
        ConfigId::NetworkOnly => StructuralParams::new(0.0, 0.015, 0.25, 0.0),
        ConfigId::FullModel => StructuralParams::new(100.0, 0.015, 0.25, 0.04),
    }
}

/// Rectangular spatial extent, market-position interval and lattice sizes.
///
/// A lattice axis with a single node is collapsed: fields are taken to be
/// constant along it. Otherwise each axis needs at least three nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialDomain {
    pub x1_range: [f64; 2],
    pub x2_range: [f64; 2],
    pub alpha_range: [f64; 2],
    pub grid: [usize; 3],
}

impl Default for SpatialDomain {
    fn default() -> Self {
        Self {
            x1_range: [0.0, 100.0],
            x2_range: [0.0, 100.0],
            alpha_range: [0.0, 1.0],
            grid: [64, 64, 16],
        }
    }
}

impl SpatialDomain {
    pub fn with_grid(mut self, grid: [usize; 3]) -> Self {
        self.grid = grid;
        self
    }

    pub fn ranges(&self) -> [[f64; 2]; 3] {
        [self.x1_range, self.x2_range, self.alpha_range]
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, r) in self.ranges().iter().enumerate() {
            if !(r[0].is_finite() && r[1].is_finite() && r[1] > r[0]) {
                return Err(Error::InvalidInput(format!(
                    "axis {axis} has non-positive extent [{}, {}]",
                    r[0], r[1]
                )));
            }
            let n = self.grid[axis];
            if n != 1 && n < 3 {
                return Err(Error::InvalidInput(format!(
                    "axis {axis} needs at least 3 lattice nodes, got {n}"
                )));
            }
        }
        Ok(())
    }

    /// Lattice spacing per axis; zero for a collapsed axis.
    pub fn spacing(&self) -> [f64; 3] {
        let r = self.ranges();
        std::array::from_fn(|a| {
            if self.grid[a] > 1 {
                (r[a][1] - r[a][0]) / (self.grid[a] - 1) as f64
            } else {
                0.0
            }
        })
    }

    pub fn contains(&self, x: [f64; 2], alpha: f64) -> bool {
        let inside = |v: f64, r: [f64; 2]| v >= r[0] && v <= r[1];
        inside(x[0], self.x1_range)
            && inside(x[1], self.x2_range)
            && inside(alpha, self.alpha_range)
    }
}

/// One simulated economic unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub id: u32,
    pub x: [f64; 2],
    pub alpha: f64,
    pub source: f64,
    pub controls: [f64; 3],
    pub outcome: f64,
    pub degree: u32,
}

/// Undirected simple graph stored as sorted neighbour lists.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Adjacency {
    neighbors: Vec<Vec<u32>>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            neighbors: vec![Vec::new(); n],
        }
    }

    /// Builds a graph from an undirected edge list. Duplicates collapse;
    /// self-loops and out-of-range endpoints are rejected.
    pub fn from_edges(n: usize, edges: &[(u32, u32)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i == j {
                return Err(Error::InvalidInput(format!("self-loop at node {i}")));
            }
            if i as usize >= n || j as usize >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({i}, {j}) outside 0..{n}"
                )));
            }
            neighbors[i as usize].push(j);
            neighbors[j as usize].push(i);
        }
        for l in &mut neighbors {
            l.sort_unstable();
            l.dedup();
        }
        Ok(Self { neighbors })
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&(j as u32)).is_ok()
    }

    /// Edges (i, j) with i < j in lexicographic order.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.n_edges());
        for (i, l) in self.neighbors.iter().enumerate() {
            for &j in l {
                if (i as u32) < j {
                    out.push((i as u32, j));
                }
            }
        }
        out
    }

    /// Symmetry and empty diagonal.
    pub fn is_symmetric_simple(&self) -> bool {
        self.neighbors.iter().enumerate().all(|(i, l)| {
            l.iter()
                .all(|&j| j as usize != i && self.has_edge(j as usize, i))
        })
    }

    /// Σ_j G_ij v_j for every i.
    pub fn spmv(&self, v: &[f64]) -> Vec<f64> {
        self.neighbors
            .iter()
            .map(|l| l.iter().map(|&j| v[j as usize]).sum())
            .collect()
    }

    /// Hop distances from `src`, capped at `max_hops`; `u32::MAX` beyond the cap.
    pub fn hops_from(&self, src: usize, max_hops: u32) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.n()];
        dist[src] = 0;
        let mut frontier = vec![src as u32];
        let mut d = 0;
        while !frontier.is_empty() && d < max_hops {
            d += 1;
            let mut next = Vec::new();
            for &u in &frontier {
                for &w in &self.neighbors[u as usize] {
                    if dist[w as usize] == u32::MAX {
                        dist[w as usize] = d;
                        next.push(w);
                    }
                }
            }
            frontier = next;
        }
        dist
    }
}

/// A cross-section of units with its current and predetermined networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub units: Vec<UnitRecord>,
    pub network: Adjacency,
    pub lagged_network: Adjacency,
    pub config_id: Option<ConfigId>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.units.len()
    }

    /// Unit ids must equal their position; both networks must be simple,
    /// symmetric and sized to the unit list.
    pub fn validate(&self) -> Result<()> {
        for (k, u) in self.units.iter().enumerate() {
            if u.id as usize != k {
                return Err(Error::InvalidInput(format!(
                    "unit at position {k} has id {}",
                    u.id
                )));
            }
            if !(0.0..=1.0).contains(&u.alpha) {
                return Err(Error::InvalidInput(format!(
                    "unit {k} has alpha {}",
                    u.alpha
                )));
            }
        }
        for (name, g) in [
            ("network", &self.network),
            ("lagged_network", &self.lagged_network),
        ] {
            if g.n() != self.units.len() {
                return Err(Error::InvalidInput(format!(
                    "{name} has {} nodes for {} units",
                    g.n(),
                    self.units.len()
                )));
            }
            if !g.is_symmetric_simple() {
                return Err(Error::InvalidInput(format!(
                    "{name} is not symmetric and loop-free"
                )));
            }
        }
        Ok(())
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.outcome).collect()
    }

    pub fn sources(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.source).collect()
    }
}
