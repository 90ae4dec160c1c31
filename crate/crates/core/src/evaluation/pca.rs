//! Principal components by power iteration with deflation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Matrix};

pub const PCA_TOLERANCE: f64 = 1e-9;
pub const PCA_MAX_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// Column means removed before projection.
    pub mean: Vec<f64>,
    /// `k` unit-norm, mutually orthogonal directions, each of length `d`.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component.
    pub eigenvalues: Vec<f64>,
    /// `eigenvalue / total variance`.
    pub explained_variance_ratio: Vec<f64>,
    /// `n × k` projections of the centered rows.
    pub coordinates: Matrix,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(v, b);
        axpy(-c, b, v);
    }
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| dot(m.row(r), v)).collect()
}

/// Projects `data` (`n × d`) onto its top `k` principal components.
pub fn pca_project(data: &Matrix, k: usize, seed: u64) -> Result<PcaProjection> {
    let (n, d) = data.shape();
    if n < 2 || d < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs n >= 2 and d >= 2, got {n}x{d}"
        )));
    }
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={d}, got {k}"
        )));
    }
    if !data.is_finite() {
        return Err(Error::InvalidArgument("PCA input must be finite".into()));
    }
    let mean: Vec<f64> = data
        .column_sums()
        .as_slice()
        .iter()
        .map(|s| s / n as f64)
        .collect();
    let mut centered = data.clone();
    for r in 0..n {
        axpy(-1.0, &mean, centered.row_mut(r));
    }
    let mut cov = centered.t_matmul(&centered);
    cov.map_inplace(|x| x / (n - 1) as f64);
    let total: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(
            "data has zero total variance".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deflated = cov.clone();
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthogonalize(&mut v, &components);
        normalize(&mut v);
        for _ in 0..PCA_MAX_ITERATIONS {
            let mut w = mat_vec(&deflated, &v);
            orthogonalize(&mut w, &components);
            if normalize(&mut w) <= f64::EPSILON * total {
                // Remaining spectrum is zero; any orthogonal direction works.
                break;
            }
            let change = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = w;
            if change < PCA_TOLERANCE {
                break;
            }
        }
        orthogonalize(&mut v, &components);
        normalize(&mut v);
        let lambda = dot(&v, &mat_vec(&cov, &v)).max(0.0);
        for i in 0..d {
            for j in 0..d {
                let cur = deflated.get(i, j);
                deflated.set(i, j, cur - lambda * v[i] * v[j]);
            }
        }
        eigenvalues.push(lambda);
        components.push(v);
    }

    let basis = Matrix::from_rows(&components);
    let coordinates = centered.matmul_t(&basis);
    let explained_variance_ratio = eigenvalues
        .iter()
        .map(|l| (l / total).clamp(0.0, 1.0))
        .collect();
    Ok(PcaProjection {
        mean,
        components,
        eigenvalues,
        explained_variance_ratio,
        coordinates,
    })
}
