use statrs::function::gamma::digamma;

use crate::error::{Error, Result};

/// Per-unit terms of the Kraskov–Stögbauer–Grassberger estimator (first
/// variant): φ_i = ψ(k) + ψ(N) − ψ(n_x,i + 1) − ψ(n_α,i + 1), whose mean
/// is the mutual information. Each coordinate is scaled to unit variance
/// first. Returns the terms and the number of jittered duplicates.
pub fn ksg_terms(coords: &[[f64; 2]], alphas: &[f64], k: usize) -> Result<(Vec<f64>, usize)> {
    let n = coords.len();
    if alphas.len() != n {
        return Err(Error::InvalidInput(
            "coordinate and market-position lengths differ".into(),
        ));
    }
    if n < 50 {
        return Err(Error::InsufficientData(format!(
            "{n} points, need at least 50"
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!(
            "neighbour count {k} outside [1, {n})"
        )));
    }
    let sd = |v: &dyn Fn(usize) -> f64| {
        let m = (0..n).map(v).sum::<f64>() / n as f64;
        let s = ((0..n).map(|i| (v(i) - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    let sc = [
        sd(&|i| coords[i][0]),
        sd(&|i| coords[i][1]),
        sd(&|i| alphas[i]),
    ];
    let mut pts: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            [
                coords[i][0] / sc[0],
                coords[i][1] / sc[1],
                alphas[i] / sc[2],
            ]
        })
        .collect();

    // Exact duplicates break the neighbour counts; nudge them apart.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        pts[a]
            .partial_cmp(&pts[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut jittered = 0;
    for w in 1..n {
        if pts[order[w]] == pts[order[w - 1]] {
            jittered += 1;
            let e = 1e-9 * jittered as f64;
            let p = &mut pts[order[w]];
            p[0] += e;
            p[1] -= e;
            p[2] += e;
        }
    }

    let cheb_x = |a: &[f64; 3], b: &[f64; 3]| (a[0] - b[0]).abs().max((a[1] - b[1]).abs());
    let psi_k = digamma(k as f64);
    let psi_n = digamma(n as f64);
    let mut dist = vec![0.0; n];
    let terms = (0..n)
        .map(|i| {
            for j in 0..n {
                dist[j] = if i == j {
                    f64::INFINITY
                } else {
                    cheb_x(&pts[i], &pts[j]).max((pts[i][2] - pts[j][2]).abs())
                };
            }
            let mut sorted = dist.clone();
            sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
            let eps = sorted[k - 1];
            let mut nx = 0usize;
            let mut ny = 0usize;
            for j in 0..n {
                if j == i {
                    continue;
                }
                if cheb_x(&pts[i], &pts[j]) < eps {
                    nx += 1;
                }
                if (pts[i][2] - pts[j][2]).abs() < eps {
                    ny += 1;
                }
            }
            psi_k + psi_n - digamma(nx as f64 + 1.0) - digamma(ny as f64 + 1.0)
        })
        .collect();
    Ok((terms, jittered))
}

/// Mutual information in nats between 2-D location and market position,
/// estimated from k nearest neighbours and clipped below at zero.
pub fn mutual_information(coords: &[[f64; 2]], alphas: &[f64], k: usize) -> Result<f64> {
    let (terms, _) = ksg_terms(coords, alphas, k)?;
    Ok((terms.iter().sum::<f64>() / terms.len() as f64).max(0.0))
}
