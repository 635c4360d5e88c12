use nalgebra::SymmetricEigen;

use super::{check_rank, svd, ConceptDecomposition, Method};
use crate::dataio::ActivationMatrix;
use crate::error::{Error, Result};
use crate::{linalg, seed, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcaConfig {
    pub rank: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self { rank: 10, seed: 0, max_iters: 1000, tol: 1e-10 }
    }
}

/// Symmetric FastICA with the log-cosh contrast on PCA-whitened data.
///
/// `U` holds the unit-variance sources and `W` the mixing rows, so that
/// `U·W + mean` reconstructs the rank-r PCA approximation. The unmixing
/// rotation has unit-norm rows.
pub fn ica(a: &ActivationMatrix, cfg: &IcaConfig) -> Result<ConceptDecomposition> {
    let a = a.data();
    check_rank(a, cfg.rank)?;
    let (n, r) = (a.nrows(), cfg.rank);
    let mean = linalg::column_means(a);
    let centered = linalg::center_columns(a, &mean);
    let (left, sigma, right) = svd::exact(&centered, r)?;
    if sigma.iter().any(|s| *s <= f64::EPSILON * sigma[0].max(1.0) * n as f64) {
        return Err(Error::invalid(format!("centered data has rank below {r}; cannot whiten")));
    }
    let root_n = (n as f64).sqrt();
    // Whitened coordinates: mean zero, identity covariance under 1/n.
    let z = left * root_n;
    let mut dewhiten = right.transpose();
    for (k, s) in sigma.iter().enumerate() {
        dewhiten.row_mut(k).scale_mut(s / root_n);
    }

    let mut rng = seed::stream(cfg.seed, "ica-init");
    let mut rot = decorrelate(&linalg::random_normal(r, r, &mut rng));
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        let proj = &z * rot.transpose();
        let g = proj.map(f64::tanh);
        let g_prime_mean: Vec<f64> = (0..r).map(|k| g.column(k).iter().map(|t| 1.0 - t * t).sum::<f64>() / n as f64).collect();
        let mut next = g.transpose() * &z / n as f64;
        for (k, &mean) in g_prime_mean.iter().enumerate() {
            let scaled = rot.row(k) * mean;
            let mut row = next.row_mut(k);
            row -= scaled;
        }
        let next = decorrelate(&next);
        let change = (0..r)
            .map(|k| (1.0 - next.row(k).dot(&rot.row(k)).abs()).abs())
            .fold(0.0, f64::max);
        rot = next;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { method: "ica", iterations });
    }

    let mut sources = &z * rot.transpose();
    let mut w = &rot * dewhiten;
    // Deterministic order (by mixing-row norm) and sign (largest entry positive).
    let mut order: Vec<usize> = (0..r).collect();
    let norms: Vec<f64> = (0..r).map(|k| w.row(k).norm()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    sources = sources.select_columns(&order);
    w = w.select_rows(&order);
    for k in 0..r {
        let pivot = w.row(k).iter().cloned().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
        if pivot < 0.0 {
            w.row_mut(k).neg_mut();
            sources.column_mut(k).neg_mut();
        }
    }

    let mut recon = &sources * &w;
    linalg::add_row_vector(&mut recon, &mean);
    let error = linalg::frobenius(&(a - recon));
    Ok(ConceptDecomposition {
        u: sources,
        w,
        method: Method::Ica,
        singular_values: None,
        right_vectors: None,
        mean: Some(mean),
        reconstruction_error: error,
        seed: Some(cfg.seed),
    })
}

/// `(R Rᵀ)^{-1/2} R`: the nearest matrix with orthonormal rows.
fn decorrelate(rot: &Matrix) -> Matrix {
    let eig = SymmetricEigen::new(rot * rot.transpose());
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt());
    let m = &eig.eigenvectors * Matrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    m * rot
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn recovers_mixed_uniform_sources() {
        for s in 0..5 {
            let mut rng = seed::rng(40 + s);
            let n = 2000;
            let sources = Matrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let mixing = Matrix::from_row_slice(2, 2, &[1.0, 0.6, 0.4, 1.0]);
            let x = &sources * mixing;
            let dec = ica(&ActivationMatrix::new(x).unwrap(), &IcaConfig { rank: 2, seed: s, ..IcaConfig::default() }).unwrap();
            for k in 0..2 {
                let truth: Vec<f64> = sources.column(k).iter().cloned().collect();
                let best = (0..2)
                    .map(|j| correlation(&truth, dec.u.column(j).as_slice()).abs())
                    .fold(0.0, f64::max);
                assert!(best >= 0.99, "seed {s} source {k}: {best}");
            }
        }
    }

    #[test]
    fn rotation_is_orthonormal_and_reconstruction_matches_pca() {
        let mut rng = seed::rng(2);
        let x = Matrix::from_fn(300, 4, |_, _| rng.random_range(-1.0..1.0f64).powi(3));
        let a = ActivationMatrix::new(x).unwrap();
        let dec = ica(&a, &IcaConfig { rank: 4, ..IcaConfig::default() }).unwrap();
        assert!(dec.reconstruction_error < 1e-9, "{}", dec.reconstruction_error);
        let n = dec.u.nrows() as f64;
        let cov = dec.u.transpose() * &dec.u / n;
        assert!((cov - Matrix::identity(4, 4)).abs().max() < 1e-8);
    }

    #[test]
    fn non_convergence_reports_iterations() {
        let mut rng = seed::rng(3);
        let x = Matrix::from_fn(200, 3, |_, _| rng.random::<f64>());
        let err = ica(&ActivationMatrix::new(x).unwrap(), &IcaConfig { rank: 3, max_iters: 1, tol: 0.0, seed: 0 }).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { method: "ica", iterations: 1 }));
    }

    #[test]
    fn deterministic_for_seed() {
        let mut rng = seed::rng(8);
        let x = ActivationMatrix::new(Matrix::from_fn(200, 3, |_, _| rng.random::<f64>())).unwrap();
        let cfg = IcaConfig { rank: 2, seed: 5, ..IcaConfig::default() };
        assert_eq!(ica(&x, &cfg).unwrap(), ica(&x, &cfg).unwrap());
    }
}
