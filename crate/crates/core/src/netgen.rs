//! Gravity-model supply-chain networks and their diagnostics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Adjacency;

/// Decay rates of the gravity link probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GravityParams {
    /// Per mile.
    pub theta_d: f64,
    pub theta_alpha: f64,
}

impl Default for GravityParams {
    fn default() -> Self {
        Self {
            theta_d: 0.02,
            theta_alpha: 2.0,
        }
    }
}

impl GravityParams {
    pub fn validate(&self) -> Result<()> {
        if self.theta_d >= 0.0 && self.theta_alpha >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "gravity decay rates must be >= 0, got {self:?}"
            )))
        }
    }

    pub fn link_probability(&self, xi: [f64; 2], xj: [f64; 2], ai: f64, aj: f64) -> f64 {
        let d = (xi[0] - xj[0]).hypot(xi[1] - xj[1]);
        (-self.theta_d * d - self.theta_alpha * (ai - aj).abs()).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkStats {
    pub avg_degree: f64,
    pub clustering: f64,
    pub avg_path_length: f64,
    pub degree_cv: f64,
}

fn check_lengths(coords: &[[f64; 2]], alphas: &[f64]) -> Result<()> {
    if coords.len() != alphas.len() {
        return Err(Error::InvalidInput(format!(
            "{} coordinates but {} market positions",
            coords.len(),
            alphas.len()
        )));
    }
    if coords.len() < 2 {
        return Err(Error::InvalidInput(
            "a network needs at least two units".into(),
        ));
    }
    Ok(())
}

/// Includes each unordered pair independently with its gravity probability.
/// Pairs are visited in a fixed order with one uniform draw each, so two calls
/// sharing an rng state differ only through the probabilities.
pub fn generate_network<R: Rng + ?Sized>(
    coords: &[[f64; 2]],
    alphas: &[f64],
    g: &GravityParams,
    rng: &mut R,
) -> Result<Adjacency> {
    check_lengths(coords, alphas)?;
    g.validate()?;
    let n = coords.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let u: f64 = rng.random();
            if u < g.link_probability(coords[i], coords[j], alphas[i], alphas[j]) {
                edges.push((i as u32, j as u32));
            }
        }
    }
    Adjacency::from_edges(n, &edges)
}

/// Builds a predetermined network from `adj`: every edge survives with
/// probability `1 - rewire_fraction`, and every pair not carried over is
/// drawn afresh with probability `rewire_fraction · p_ij`.
pub fn lag_network<R: Rng + ?Sized>(
    adj: &Adjacency,
    coords: &[[f64; 2]],
    alphas: &[f64],
    g: &GravityParams,
    rewire_fraction: f64,
    rng: &mut R,
) -> Result<Adjacency> {
    check_lengths(coords, alphas)?;
    if adj.n() != coords.len() {
        return Err(Error::InvalidInput(
            "adjacency size does not match coordinates".into(),
        ));
    }
    if !(0.0..=1.0).contains(&rewire_fraction) {
        return Err(Error::InvalidInput(format!(
            "rewire_fraction {rewire_fraction} outside [0, 1]"
        )));
    }
    let n = adj.n();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let keep: f64 = rng.random();
            let fresh: f64 = rng.random();
            if adj.has_edge(i, j) && keep < 1.0 - rewire_fraction {
                edges.push((i as u32, j as u32));
            } else if fresh
                < rewire_fraction * g.link_probability(coords[i], coords[j], alphas[i], alphas[j])
            {
                edges.push((i as u32, j as u32));
            }
        }
    }
    Adjacency::from_edges(n, &edges)
}

fn sorted_intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut c) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                c += 1;
                i += 1;
                j += 1;
            }
        }
    }
    c
}

/// Connected components, largest first.
pub fn components(adj: &Adjacency) -> Vec<Vec<usize>> {
    let n = adj.n();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut k = 0;
        while k < comp.len() {
            let u = comp[k];
            k += 1;
            for &w in adj.neighbors(u) {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    comp.push(w as usize);
                }
            }
        }
        out.push(comp);
    }
    out.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    out
}

/// Average degree, average local clustering, mean shortest-path length on the
/// largest component, and the coefficient of variation of degrees.
pub fn graph_stats(adj: &Adjacency) -> NetworkStats {
    let n = adj.n();
    if n == 0 {
        return NetworkStats {
            avg_degree: 0.0,
            clustering: 0.0,
            avg_path_length: 0.0,
            degree_cv: 0.0,
        };
    }
    let deg: Vec<f64> = adj.degrees().into_iter().map(|d| d as f64).collect();
    let mean = deg.iter().sum::<f64>() / n as f64;
    let var = deg.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
    let degree_cv = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };

    let mut clustering = 0.0;
    for i in 0..n {
        let nb = adj.neighbors(i);
        let k = nb.len();
        if k < 2 {
            continue;
        }
        let links: usize = nb
            .iter()
            .map(|&j| sorted_intersection_len(nb, adj.neighbors(j as usize)))
            .sum();
        clustering += (links as f64 / 2.0) / (k * (k - 1) / 2) as f64;
    }
    clustering /= n as f64;

    let comps = components(adj);
    let lcc = &comps[0];
    let mut total = 0u64;
    let mut pairs = 0u64;
    if lcc.len() > 1 {
        let mut dist = vec![u32::MAX; n];
        let mut queue = Vec::with_capacity(lcc.len());
        for &s in lcc {
            for &v in lcc {
                dist[v] = u32::MAX;
            }
            dist[s] = 0;
            queue.clear();
            queue.push(s as u32);
            let mut k = 0;
            while k < queue.len() {
                let u = queue[k] as usize;
                k += 1;
                for &w in adj.neighbors(u) {
                    if dist[w as usize] == u32::MAX {
                        dist[w as usize] = dist[u] + 1;
                        total += dist[w as usize] as u64;
                        queue.push(w);
                    }
                }
            }
            pairs += (lcc.len() - 1) as u64;
        }
    }
    let avg_path_length = if pairs > 0 {
        total as f64 / pairs as f64
    } else {
        0.0
    };
    NetworkStats {
        avg_degree: mean,
        clustering,
        avg_path_length,
        degree_cv,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn complete(n: usize) -> Adjacency {
        let mut e = Vec::new();
        for i in 0..n as u32 {
            for j in (i + 1)..n as u32 {
                e.push((i, j));
            }
        }
        Adjacency::from_edges(n, &e).unwrap()
    }

    #[test]
    fn k4_stats() {
        let s = graph_stats(&complete(4));
        assert_eq!(s.clustering, 1.0);
        assert_eq!(s.avg_path_length, 1.0);
        assert_eq!(s.avg_degree, 3.0);
        assert_eq!(s.degree_cv, 0.0);
    }

    #[test]
    fn path3_stats() {
        let g = Adjacency::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let s = graph_stats(&g);
        assert!((s.avg_path_length - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.clustering, 0.0);
    }

    #[test]
    fn path_length_ignores_small_components() {
        // triangle plus an isolated edge
        let g = Adjacency::from_edges(5, &[(0, 1), (1, 2), (0, 2), (3, 4)]).unwrap();
        let s = graph_stats(&g);
        assert_eq!(s.avg_path_length, 1.0);
        assert!((s.clustering - 3.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn huge_distance_decay_gives_empty_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords: Vec<[f64; 2]> = (0..50).map(|i| [i as f64, 0.5 * i as f64]).collect();
        let alphas = vec![0.5; 50];
        let g = GravityParams {
            theta_d: 1e9,
            theta_alpha: 2.0,
        };
        assert_eq!(
            generate_network(&coords, &alphas, &g, &mut rng)
                .unwrap()
                .n_edges(),
            0
        );
    }

    #[test]
    fn coincident_units_always_link() {
        let g = GravityParams::default();
        for s in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let a = generate_network(&[[3.0, 4.0], [3.0, 4.0]], &[0.2, 0.2], &g, &mut rng).unwrap();
            assert!(a.has_edge(0, 1));
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GravityParams::default();
        assert!(generate_network(&[[0.0, 0.0], [1.0, 1.0]], &[0.1], &g, &mut rng).is_err());
    }
}
