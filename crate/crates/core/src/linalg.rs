//! Small dense least-squares helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal};

use crate::error::{Error, Result};

/// Design matrix from named columns.
pub struct Design {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
}

impl Design {
    pub fn new(n: usize) -> Self {
        Self {
            names: Vec::new(),
            x: DMatrix::zeros(n, 0),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, col: &[f64]) {
        let k = self.x.ncols();
        let x = std::mem::replace(&mut self.x, DMatrix::zeros(0, 0));
        self.x = x.insert_column(k, 0.0);
        self.x.column_mut(k).copy_from_slice(col);
        self.names.push(name.into());
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Columns that are numerically independent of the ones before them,
/// by modified Gram–Schmidt with a relative tolerance.
pub fn independent_columns(x: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..x.ncols() {
        let mut v = x.column(j).into_owned();
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        for q in &basis {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
        for q in &basis {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
        let nv = v.norm();
        if nv > rel_tol * norm0 {
            basis.push(v / nv);
            kept.push(j);
        }
    }
    kept
}

pub fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))
}

/// Symmetrizes and clips negative eigenvalues to zero.
pub fn psd_clip(a: &DMatrix<f64>) -> DMatrix<f64> {
    let s = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Moore–Penrose inverse of a symmetric matrix, dropping eigenvalues below
/// `rel_tol` times the largest.
pub fn pinv_sym(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let s = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| {
        if l.abs() > rel_tol * lmax && lmax > 0.0 {
            1.0 / l
        } else {
            0.0
        }
    }));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Ordinary least squares after dropping collinear columns.
#[derive(Debug, Clone)]
pub struct Ols {
    /// Coefficients for every original column; zero for dropped ones.
    pub beta: DVector<f64>,
    pub resid: DVector<f64>,
    pub fitted: DVector<f64>,
    /// Indices of retained columns.
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    /// (X'X)⁻¹ over retained columns.
    pub xtx_inv: DMatrix<f64>,
    /// Retained design.
    pub xk: DMatrix<f64>,
}

impl Ols {
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::InvalidInput(
                "design and response lengths differ".into(),
            ));
        }
        let kept = independent_columns(x, 1e-9);
        if x.nrows() <= kept.len() {
            return Err(Error::InsufficientData(format!(
                "{} rows for {} regressors",
                x.nrows(),
                kept.len()
            )));
        }
        let dropped = (0..x.ncols()).filter(|j| !kept.contains(j)).collect();
        let xk = select_columns(x, &kept);
        let xtx_inv = spd_inverse(&(xk.transpose() * &xk))?;
        let bk = &xtx_inv * (xk.transpose() * y);
        let fitted = &xk * &bk;
        let resid = y - &fitted;
        let mut beta = DVector::zeros(x.ncols());
        for (a, &j) in kept.iter().enumerate() {
            beta[j] = bk[a];
        }
        Ok(Self {
            beta,
            resid,
            fitted,
            kept,
            dropped,
            xtx_inv,
            xk,
        })
    }

    /// Position of original column `j` among the retained ones.
    pub fn kept_position(&self, j: usize) -> Option<usize> {
        self.kept.iter().position(|&k| k == j)
    }

    /// (X'X)⁻¹ M (X'X)⁻¹ over retained columns.
    pub fn sandwich(&self, meat: &DMatrix<f64>) -> DMatrix<f64> {
        &self.xtx_inv * meat * &self.xtx_inv
    }

    /// Heteroskedasticity-robust meat Σ e_i² x_i x_i'.
    pub fn hc0_meat(&self) -> DMatrix<f64> {
        let k = self.xk.ncols();
        let mut m = DMatrix::zeros(k, k);
        for i in 0..self.xk.nrows() {
            let xi = self.xk.row(i).transpose() * self.resid[i];
            m += &xi * xi.transpose();
        }
        m
    }

    /// Cluster meat Σ_g (Σ_{i∈g} e_i x_i)(Σ_{i∈g} e_i x_i)'.
    pub fn cluster_meat(&self, clusters: &[usize]) -> DMatrix<f64> {
        let k = self.xk.ncols();
        let g = clusters.iter().max().map_or(0, |m| m + 1);
        let mut sums = vec![DVector::<f64>::zeros(k); g];
        for i in 0..self.xk.nrows() {
            sums[clusters[i]] += self.xk.row(i).transpose() * self.resid[i];
        }
        let mut m = DMatrix::zeros(k, k);
        for s in &sums {
            m += s * s.transpose();
        }
        m
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").cdf(z)
}

pub fn chi2_sf(x: f64, dof: f64) -> f64 {
    if dof <= 0.0 {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(dof).expect("positive dof").sf(x)
}

pub fn f_sf(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    FisherSnedecor::new(d1, d2).expect("positive dof").sf(x)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_drops_duplicate_columns() {
        let n = 20;
        let x1: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut d = Design::new(n);
        d.push("one", &vec![1.0; n]);
        d.push("x", &x1);
        d.push("x_again", &x1.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
        let y = DVector::from_iterator(n, x1.iter().map(|v| 3.0 + 0.5 * v));
        let f = Ols::fit(&d.x, &y).unwrap();
        assert_eq!(f.dropped, vec![2]);
        assert!((f.beta[0] - 3.0).abs() < 1e-10 && (f.beta[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn psd_clip_removes_negative_directions() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let c = psd_clip(&a);
        let e = SymmetricEigen::new(c).eigenvalues;
        assert!(e.iter().all(|&l| l >= -1e-12));
    }
}
