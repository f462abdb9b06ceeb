//! Principal component analysis over (optionally weighted) rows.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;

/// Components whose variance falls below this fraction of the largest are dropped.
const RELATIVE_EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One unit-length component per row.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.input_dim(), x.len())?;
        Ok(self
            .components
            .iter_rows()
            .map(|c| {
                c.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(ci, (xi, mi))| ci * (xi - mi))
                    .sum()
            })
            .collect())
    }

    pub fn project_rows(&self, rows: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(rows.rows(), self.output_dim());
        for i in 0..rows.rows() {
            let p = self.project(rows.row(i))?;
            out.row_mut(i).copy_from_slice(&p);
        }
        Ok(out)
    }

    /// Unweighted fit keeping at most `k` components.
    pub fn fit(data: &Matrix, k: usize) -> Result<Pca> {
        Pca::fit_weighted(data, &vec![1.0; data.rows()], k)
    }

    /// Fit where row `i` stands for `weights[i]` identical observations.
    ///
    /// Uses the covariance matrix when there are more rows than dimensions and
    /// the (smaller) Gram matrix otherwise; both give the same components.
    pub fn fit_weighted(data: &Matrix, weights: &[f64], k: usize) -> Result<Pca> {
        ensure_dim(data.rows(), weights.len())?;
        if data.rows() == 0 || k == 0 {
            return Err(Error::argument(
                "PCA needs at least one row and one component",
            ));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::argument(
                "PCA weights must be non-negative with positive sum",
            ));
        }
        let (u, d) = (data.rows(), data.cols());
        let mut mean = vec![0.0; d];
        for (row, &w) in data.iter_rows().zip(weights) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += w * v;
            }
        }
        for m in &mut mean {
            *m /= total;
        }
        // Y = diag(sqrt(w / W)) (X - mean), so Y'Y is the covariance.
        let y = DMatrix::from_fn(u, d, |i, j| {
            (weights[i] / total).sqrt() * (data.get(i, j) - mean[j])
        });

        let mut pairs: Vec<(f64, Vec<f64>)> = if u >= d {
            let cov = y.transpose() * &y;
            let eig = SymmetricEigen::new(cov);
            (0..d)
                .map(|c| {
                    (
                        eig.eigenvalues[c],
                        eig.eigenvectors.column(c).iter().copied().collect(),
                    )
                })
                .collect()
        } else {
            let gram = &y * y.transpose();
            let eig = SymmetricEigen::new(gram);
            (0..u)
                .filter(|&c| eig.eigenvalues[c] > 0.0)
                .map(|c| {
                    let lambda = eig.eigenvalues[c];
                    let v = y.transpose() * eig.eigenvectors.column(c);
                    let n = v.norm();
                    (lambda, v.iter().map(|x| x / n).collect())
                })
                .collect()
        };
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let top = pairs.first().map(|p| p.0).unwrap_or(0.0);
        let kept: Vec<(f64, Vec<f64>)> = pairs
            .into_iter()
            .filter(|(l, _)| top > 0.0 && *l > RELATIVE_EIGEN_FLOOR * top)
            .take(k)
            .map(|(l, mut v)| {
                // Sign convention: the largest-magnitude entry is positive.
                let pivot =
                    v.iter()
                        .copied()
                        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
                if pivot < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                (l, v)
            })
            .collect();
        if kept.is_empty() {
            return Err(Error::invalid("PCA input has no variance"));
        }
        let explained_variance = kept.iter().map(|p| p.0).collect();
        let rows: Vec<Vec<f64>> = kept.into_iter().map(|p| p.1).collect();
        Ok(Pca {
            mean,
            components: Matrix::from_rows(&rows, d)?,
            explained_variance,
        })
    }
}
