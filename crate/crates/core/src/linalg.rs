//! Small dense linear-algebra helpers shared by the decomposition, probe and
//! Sobol modules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::Matrix;

pub fn frobenius(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn column_means(m: &Matrix) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Subtracts `mean` from every row.
pub fn center_columns(m: &Matrix, mean: &DVector<f64>) -> Matrix {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    out
}

/// Adds `mean` back to every row.
pub fn add_row_vector(m: &mut Matrix, mean: &DVector<f64>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(mean[j]);
    }
}

pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    // Column-major fill order is part of the determinism contract.
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Row-wise softmax with the max-shift trick.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// log-softmax of a single row, evaluated at `class`.
pub fn log_softmax_at(row: &[f64], class: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[class] - lse
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Orthonormal basis of the column space via thin QR.
pub fn orthonormal_columns(m: Matrix) -> Matrix {
    m.qr().q()
}

/// Largest absolute off-diagonal entry of the Gram matrix of the
/// column-normalized `m`.
pub fn max_offdiag_normalized_gram(m: &Matrix) -> f64 {
    let mut normalized = m.clone();
    for mut col in normalized.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let gram = normalized.transpose() * &normalized;
    let mut worst: f64 = 0.0;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            if i != j {
                worst = worst.max(gram[(i, j)].abs());
            }
        }
    }
    worst
}

/// Sines of the principal angles between two column spaces; all zero when
/// the spaces coincide.
pub fn principal_angle_sines(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let qa = orthonormal_columns(a.clone());
    let qb = orthonormal_columns(b.clone());
    // Sines are the singular values of the component of Qb outside span(Qa);
    // this stays accurate for tiny angles where sqrt(1 - cos²) does not.
    let residual = &qb - &qa * (qa.transpose() * &qb);
    let mut sines: Vec<f64> = residual.singular_values().iter().cloned().collect();
    sines.sort_by(|x, y| x.total_cmp(y));
    sines
}
