//! Federated principal component analysis from additively-merged Gram
//! contributions.
//!
//! Each client uploads (n_i, per-feature sums s_i, Gram matrix X'X); the
//! server reconstructs the pooled scatter S = sum G_i - N mu mu' without ever
//! seeing a row, then eigendecomposes the covariance S/(N-1).

// Matrix kernels index rows and columns together; iterator rewrites of these
// loops read worse.
#![allow(clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};

use super::QueryError;

/// One client's contribution to a matrix-transformation query, built over
/// the schema's numeric predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramContribution {
    pub n_samples: u64,
    /// Column sums of the local predictor matrix.
    pub feature_sums: Vec<f64>,
    /// X'X over the local rows, d x d, symmetric.
    pub gram: Vec<Vec<f64>>,
}

impl GramContribution {
    /// Builds the contribution from raw predictor rows.
    pub fn from_rows<'a, I>(dim: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0u64;
        let mut sums = vec![0.0; dim];
        let mut gram = vec![vec![0.0; dim]; dim];
        for row in rows {
            debug_assert_eq!(row.len(), dim);
            n += 1;
            for i in 0..dim {
                sums[i] += row[i];
                for j in i..dim {
                    gram[i][j] += row[i] * row[j];
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                gram[i][j] = gram[j][i];
            }
        }
        GramContribution {
            n_samples: n,
            feature_sums: sums,
            gram,
        }
    }

    pub fn dim(&self) -> usize {
        self.feature_sums.len()
    }

    /// Checks symmetry and positive semidefiniteness (within 1e-9 of the
    /// matrix scale) plus dimension coherence.
    pub fn validate(&self) -> Result<(), QueryError> {
        let d = self.dim();
        if self.gram.len() != d || self.gram.iter().any(|r| r.len() != d) {
            return Err(QueryError::ShapeMismatch);
        }
        let scale = self
            .gram
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |a, &x| a.max(x.abs()))
            .max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (self.gram[i][j] - self.gram[j][i]).abs() > 1e-9 * scale {
                    return Err(QueryError::AsymmetricGram);
                }
            }
        }
        let (eigenvalues, _) = symmetric_eigen(&self.gram);
        if eigenvalues.iter().any(|&l| l < -1e-9 * scale) {
            return Err(QueryError::IndefiniteGram);
        }
        Ok(())
    }

    /// Elementwise addition; the aggregation rule for Gram payloads.
    pub fn add(&self, other: &Self) -> Result<Self, QueryError> {
        let d = self.dim();
        if other.dim() != d {
            return Err(QueryError::ShapeMismatch);
        }
        let mut out = self.clone();
        out.n_samples += other.n_samples;
        for i in 0..d {
            out.feature_sums[i] += other.feature_sums[i];
            for j in 0..d {
                out.gram[i][j] += other.gram[i][j];
            }
        }
        Ok(out)
    }
}

/// Top-k projection with explained-variance bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// k eigenvector columns, each of length d, eigenvalue-descending,
    /// sign-normalized so each column's largest-magnitude entry is positive.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues matching the returned columns.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalue share of the full covariance trace, per returned column.
    pub explained_variance_ratio: Vec<f64>,
    /// Set when k exceeds the numerical rank of the covariance.
    pub rank_deficient: bool,
}

/// Assembles the pooled covariance from a merged Gram contribution and
/// extracts the leading k components.
pub fn pca_from_gram(total: &GramContribution, k: usize) -> Result<PcaResult, QueryError> {
    let d = total.dim();
    if k == 0 || k > d {
        return Err(QueryError::InvalidComponents { k, dim: d });
    }
    if total.n_samples < 2 {
        return Err(QueryError::InsufficientSamples {
            have: total.n_samples,
            need: 2,
        });
    }
    let n = total.n_samples as f64;
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..d {
        let mu_i = total.feature_sums[i] / n;
        for j in 0..d {
            let mu_j = total.feature_sums[j] / n;
            cov[i][j] = (total.gram[i][j] - n * mu_i * mu_j) / (n - 1.0);
        }
    }
    let (eigenvalues, vectors) = symmetric_eigen(&cov);
    let trace: f64 = eigenvalues.iter().sum();
    let tol = 1e-12 * eigenvalues.first().copied().unwrap_or(0.0).abs().max(1.0);
    let rank = eigenvalues.iter().filter(|&&l| l > tol).count();

    let components: Vec<Vec<f64>> = (0..k).map(|c| normalize_sign(&vectors, c)).collect();
    let explained: Vec<f64> = eigenvalues
        .iter()
        .take(k)
        .map(|&l| if trace > 0.0 { l / trace } else { 0.0 })
        .collect();
    Ok(PcaResult {
        components,
        eigenvalues: eigenvalues[..k].to_vec(),
        explained_variance_ratio: explained,
        rank_deficient: k > rank,
    })
}

fn normalize_sign(vectors: &[Vec<f64>], col: usize) -> Vec<f64> {
    let d = vectors.len();
    let mut v: Vec<f64> = (0..d).map(|r| vectors[r][col]).collect();
    let mut pivot = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    if v[pivot] < 0.0 {
        for x in &mut v {
            *x = -*x;
        }
    }
    v
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order with the matching eigenvector
/// columns. Intended for the small covariance matrices of tabular schemas.
pub fn symmetric_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v = vec![vec![0.0; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    if d <= 1 {
        return (a.iter().map(|r| r.first().copied().unwrap_or(0.0)).collect(), v);
    }

    let frobenius: f64 = a
        .iter()
        .flat_map(|r| r.iter().map(|x| x * x))
        .sum::<f64>()
        .sqrt();
    let threshold = 1e-15 * frobenius.max(1.0);

    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum::<f64>()
            .sqrt();
        if off <= threshold {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p][q].abs() <= threshold * 1e-2 {
                    continue;
                }
                // Rotation angle zeroing a[p][q].
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = a[p][j];
                    let aqj = a[q][j];
                    a[p][j] = c * apj - s * aqj;
                    a[q][j] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[i][p];
                    let viq = v[i][q];
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap_or(std::cmp::Ordering::Equal));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i][i]).collect();
    let mut vectors = vec![vec![0.0; d]; d];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..d {
            vectors[r][new_col] = v[r][old_col];
        }
    }
    (eigenvalues, vectors)
}
