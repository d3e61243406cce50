//! Fréchet and kernel distances between embedding sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::EmbeddingSet;
use super::MetricError;

/// Eigenvalues above this are treated as round-off and clamped to zero.
const NEG_EIGEN_TOL: f64 = -1e-8;

fn check_pair(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<(), MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::DimensionMismatch {
            a: a.dim(),
            b: b.dim(),
        });
    }
    for s in [a, b] {
        if s.rows() < 2 {
            return Err(MetricError::TooFewRows {
                rows: s.rows(),
                min: 2,
            });
        }
    }
    Ok(())
}

fn mean_and_cov(s: &EmbeddingSet) -> (DVector<f64>, DMatrix<f64>) {
    let x = s.to_matrix();
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

fn clamped_eigenvalues(m: DMatrix<f64>) -> Vec<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < NEG_EIGEN_TOL {
                log::warn!("covariance product has eigenvalue {l:e}; clamping to 0");
            }
            l.max(0.0)
        })
        .collect()
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))` with unbiased
/// covariances. The trace of the square root is taken from the eigenvalues
/// of the symmetric product `S_a^(1/2) S_b S_a^(1/2)`.
pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    for s in [a, b] {
        if s.rows() <= s.dim() {
            log::warn!(
                "{} rows for dimension {}: covariance is rank-deficient",
                s.rows(),
                s.dim()
            );
        }
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);
    let root_a = sym_sqrt(&cov_a);
    let product = &root_a * &cov_b * &root_a;
    let tr_sqrt: f64 = clamped_eigenvalues(product).iter().map(|l| l.sqrt()).sum();
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

fn kernel_matrix(x: &DMatrix<f64>, y: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    (x * y.transpose()).map(|v| (v / dim as f64 + 1.0).powi(3))
}

/// Unbiased MMD² with the cubic polynomial kernel `(x·y/d + 1)^3`.
pub fn kid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    let d = a.dim();
    let (xa, xb) = (a.to_matrix(), b.to_matrix());
    let (m, n) = (a.rows() as f64, b.rows() as f64);
    let kaa = kernel_matrix(&xa, &xa, d);
    let kbb = kernel_matrix(&xb, &xb, d);
    let kab = kernel_matrix(&xa, &xb, d);
    let within_a = (kaa.sum() - kaa.trace()) / (m * (m - 1.0));
    let within_b = (kbb.sum() - kbb.trace()) / (n * (n - 1.0));
    Ok(within_a + within_b - 2.0 * kab.sum() / (m * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidSubsetEstimate {
    pub mean: f64,
    pub std: f64,
    pub subsets: usize,
    pub subset_size: usize,
}

/// Averages [`kid`] over random equal-size subsets drawn without replacement.
pub fn kid_subsets(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    subsets: usize,
    subset_size: usize,
    seed: u64,
) -> Result<KidSubsetEstimate, MetricError> {
    check_pair(a, b)?;
    if subsets == 0 {
        return Err(MetricError::Validation(
            "subset count must be positive".into(),
        ));
    }
    let size = subset_size.min(a.rows()).min(b.rows());
    if size < 2 {
        return Err(MetricError::TooFewRows { rows: size, min: 2 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(subsets);
    for _ in 0..subsets {
        let ia = sample(&mut rng, a.rows(), size).into_vec();
        let ib = sample(&mut rng, b.rows(), size).into_vec();
        values.push(kid(&a.select(&ia), &b.select(&ib))?);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64
    } else {
        0.0
    };
    Ok(KidSubsetEstimate {
        mean,
        std: var.sqrt(),
        subsets,
        subset_size: size,
    })
}
