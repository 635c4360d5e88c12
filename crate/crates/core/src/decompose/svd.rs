use super::{check_rank, ConceptDecomposition, Method};
use crate::dataio::ActivationMatrix;
use crate::error::{Error, Result};
use crate::{linalg, seed, Matrix};

/// Widths above this switch the automatic choice to the randomized solver.
pub const RANDOMIZED_MIN_COLS: usize = 4097;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvdAlgorithm {
    /// Exact below [`RANDOMIZED_MIN_COLS`] columns, randomized above.
    Auto,
    Exact,
    Randomized { power_iters: usize, oversampling: usize, seed: u64 },
}

impl SvdAlgorithm {
    pub const RANDOMIZED_DEFAULT: SvdAlgorithm = SvdAlgorithm::Randomized { power_iters: 2, oversampling: 8, seed: 0 };
}

/// Rank-r SVD with `U` the left singular vectors and `W = Σ·Vᵀ`.
pub fn truncated_svd(a: &ActivationMatrix, rank: usize) -> Result<ConceptDecomposition> {
    truncated_svd_with(a.data(), rank, SvdAlgorithm::Auto)
}

pub fn truncated_svd_with(a: &Matrix, rank: usize, algorithm: SvdAlgorithm) -> Result<ConceptDecomposition> {
    check_rank(a, rank)?;
    let algorithm = match algorithm {
        SvdAlgorithm::Auto if a.ncols() >= RANDOMIZED_MIN_COLS => SvdAlgorithm::RANDOMIZED_DEFAULT,
        SvdAlgorithm::Auto => SvdAlgorithm::Exact,
        other => other,
    };
    let (left, sigma, right) = match algorithm {
        SvdAlgorithm::Randomized { power_iters, oversampling, seed } => randomized(a, rank, power_iters, oversampling, seed)?,
        _ => exact(a, rank)?,
    };
    Ok(assemble(a, left, sigma, right, Method::Svd, None))
}

/// Truncated SVD of the column-centered matrix; the mean is kept for
/// reconstruction.
pub fn pca(a: &ActivationMatrix, rank: usize) -> Result<ConceptDecomposition> {
    let mean = linalg::column_means(a.data());
    let centered = linalg::center_columns(a.data(), &mean);
    let mut dec = truncated_svd_with(&centered, rank, SvdAlgorithm::Auto)?;
    dec.method = Method::Pca;
    dec.mean = Some(mean);
    Ok(dec)
}

/// Returns `(U_r, σ_r, V_r)` with σ sorted non-increasing.
pub(crate) fn exact(a: &Matrix, rank: usize) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let svd = a.clone().try_svd(true, true, f64::EPSILON, 0).ok_or(Error::NoConvergence { method: "svd", iterations: 0 })?;
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
    order.truncate(rank);
    let sigma = order.iter().map(|&k| svd.singular_values[k]).collect();
    let left = u.select_columns(&order);
    let right = v_t.select_rows(&order).transpose();
    Ok((left, sigma, right))
}

fn randomized(a: &Matrix, rank: usize, power_iters: usize, oversampling: usize, seed: u64) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let width = (rank + oversampling).min(a.nrows().min(a.ncols()));
    let mut rng = seed::stream(seed, "randomized-svd");
    let omega = linalg::random_normal(a.ncols(), width, &mut rng);
    let mut q = linalg::orthonormal_columns(a * omega);
    for _ in 0..power_iters {
        let z = linalg::orthonormal_columns(a.transpose() * &q);
        q = linalg::orthonormal_columns(a * z);
    }
    let b = q.transpose() * a;
    let (small_left, sigma, right) = exact(&b, rank)?;
    Ok((q * small_left, sigma, right))
}

pub(crate) fn assemble(
    a: &Matrix,
    mut left: Matrix,
    sigma: Vec<f64>,
    mut right: Matrix,
    method: Method,
    seed: Option<u64>,
) -> ConceptDecomposition {
    for k in 0..sigma.len() {
        let col = right.column(k);
        let pivot = col.iter().cloned().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            right.column_mut(k).neg_mut();
            left.column_mut(k).neg_mut();
        }
    }
    let mut w = right.transpose();
    for (k, s) in sigma.iter().enumerate() {
        w.row_mut(k).scale_mut(*s);
    }
    let error = linalg::frobenius(&(a - &left * &w));
    ConceptDecomposition {
        u: left,
        w,
        method,
        singular_values: Some(sigma),
        right_vectors: Some(right),
        mean: None,
        reconstruction_error: error,
        seed,
    }
}
