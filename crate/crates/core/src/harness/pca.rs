//! Principal component analysis via cyclic Jacobi eigendecomposition of the
//! sample covariance. Dimensions here are small (latent width), so the dense
//! Jacobi sweep is plenty.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Row-per-component projection basis, descending eigenvalue order.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Components whose eigenvalue was numerically zero are zero-padded.
    pub padded: usize,
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(ci, (xi, mi))| ci * (xi - mi))
                    .sum()
            })
            .collect()
    }

    /// Total variance captured by the kept components.
    pub fn captured_variance(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

/// Jacobi eigendecomposition of a symmetric matrix; returns (eigenvalues,
/// eigenvectors as columns).
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[p][i];
                    let aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for row in v.iter_mut() {
                    let vip = row[p];
                    let viq = row[q];
                    row[p] = c * vip - s * viq;
                    row[q] = s * vip + c * viq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    (eigenvalues, v)
}

/// Fits PCA on `data`, keeping `n_components` components. Degenerate
/// directions (zero variance) are padded with zero vectors and counted in
/// `padded`.
pub fn fit_pca(data: &[Vec<f64>], n_components: usize) -> Result<Pca> {
    if data.is_empty() {
        return Err(Error::argument("pca needs at least one sample"));
    }
    let dim = data[0].len();
    if data.iter().any(|x| x.len() != dim) {
        return Err(Error::argument("pca samples must share a dimension"));
    }
    if n_components > dim {
        return Err(Error::argument(format!(
            "cannot keep {n_components} components of {dim}-dim data"
        )));
    }
    let n = data.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n)
        .collect();
    let mut cov = vec![vec![0.0; dim]; dim];
    for x in data {
        let centered: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..dim {
            for j in i..dim {
                cov[i][j] += centered[i] * centered[j] / n;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    let (eigenvalues, vectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(n_components);
    let mut kept_eigenvalues = Vec::with_capacity(n_components);
    let mut padded = 0;
    for &idx in order.iter().take(n_components) {
        let ev = eigenvalues[idx].max(0.0);
        if ev <= 1e-12 {
            components.push(vec![0.0; dim]);
            kept_eigenvalues.push(0.0);
            padded += 1;
        } else {
            let mut col: Vec<f64> = (0..dim).map(|i| vectors[i][idx]).collect();
            // fix the sign so the fit is deterministic: largest-magnitude
            // entry positive
            let lead = col
                .iter()
                .cloned()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(1.0);
            if lead < 0.0 {
                for c in col.iter_mut() {
                    *c = -*c;
                }
            }
            components.push(col);
            kept_eigenvalues.push(ev);
        }
    }
    Ok(Pca {
        mean,
        components,
        eigenvalues: kept_eigenvalues,
        padded,
    })
}
