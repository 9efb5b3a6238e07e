use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_clip;
use crate::types::Adjacency;

/// Product Bartlett kernel over spatial distance and network hops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HacSpec {
    /// Spatial bandwidth in miles.
    pub spatial_bandwidth: f64,
    /// Network bandwidth in hops.
    pub network_bandwidth: f64,
}

impl Default for HacSpec {
    fn default() -> Self {
        Self {
            spatial_bandwidth: 10.0,
            network_bandwidth: 2.0,
        }
    }
}

impl HacSpec {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_bandwidth > 0.0 && self.network_bandwidth > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidInput(
                "HAC bandwidths must be positive".into(),
            ))
        }
    }

    /// Largest hop count with positive kernel weight.
    pub fn max_hops(&self) -> u32 {
        let b = self.network_bandwidth;
        if b >= u32::MAX as f64 {
            u32::MAX - 1
        } else {
            (b.ceil() as u32).saturating_sub(1)
        }
    }
}

fn bartlett(u: f64) -> f64 {
    (1.0 - u).max(0.0)
}

/// For every unit, the units within `max_hops` of it and their hop counts,
/// itself included at distance 0.
pub fn network_distances(adj: &Adjacency, max_hops: u32) -> Vec<Vec<(u32, u32)>> {
    (0..adj.n())
        .map(|i| {
            adj.hops_from(i, max_hops)
                .into_iter()
                .enumerate()
                .filter(|(_, h)| *h != u32::MAX)
                .map(|(j, h)| (j as u32, h))
                .collect()
        })
        .collect()
}

/// Σ_i Σ_j k_s(d_ij/b_s)·k_n(h_ij/b_n)·m_i m_j', symmetrized and projected
/// onto the PSD cone. Rows of `moments` are unit contributions; pairs not
/// listed in `hops` are unreachable and get weight zero.
pub fn hac_cov(
    moments: &DMatrix<f64>,
    coords: &[[f64; 2]],
    hops: &[Vec<(u32, u32)>],
    spec: &HacSpec,
) -> DMatrix<f64> {
    let (n, p) = moments.shape();
    assert_eq!(coords.len(), n, "one coordinate per moment row");
    assert_eq!(hops.len(), n, "one hop list per moment row");
    let mut s = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let mi = moments.row(i);
        let mut acc = vec![0.0; p];
        for &(j, h) in &hops[i] {
            let j = j as usize;
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            let w = bartlett((dx * dx + dy * dy).sqrt() / spec.spatial_bandwidth)
                * bartlett(f64::from(h) / spec.network_bandwidth);
            if w > 0.0 {
                for (a, v) in acc.iter_mut().enumerate() {
                    *v += w * moments[(j, a)];
                }
            }
        }
        for a in 0..p {
            for b in 0..p {
                s[(a, b)] += mi[a] * acc[b];
            }
        }
    }
    let out = psd_clip(&s);
    debug_assert!(nalgebra::SymmetricEigen::new(out.clone())
        .eigenvalues
        .iter()
        .all(|&l| l >= -1e-10 * out.amax().max(1.0)));
    out
}
