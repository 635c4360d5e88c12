//! Concept discovery: `A ≈ U·W` with `U` (n×r) holding per-instance concept
//! coefficients and `W` (r×d) holding one concept direction per row.

mod ica;
mod nmf;
mod svd;

pub use ica::{ica, IcaConfig};
pub use nmf::{nmf, nmf_traced, NmfConfig};
pub use svd::{pca, truncated_svd, truncated_svd_with, SvdAlgorithm, RANDOMIZED_MIN_COLS};

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, ActivationMatrix};
use crate::error::{Error, Result};
use crate::{linalg, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nmf,
    Svd,
    Pca,
    Ica,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Nmf => "nmf",
            Method::Svd => "svd",
            Method::Pca => "pca",
            Method::Ica => "ica",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nmf" => Ok(Method::Nmf),
            "svd" => Ok(Method::Svd),
            "pca" => Ok(Method::Pca),
            "ica" => Ok(Method::Ica),
            other => Err(Error::invalid(format!("unknown decomposition method {other:?}"))),
        }
    }
}

/// Factor pair `(U, W)` with method-specific extras.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDecomposition {
    pub u: Matrix,
    pub w: Matrix,
    pub method: Method,
    /// Singular values (SVD/PCA), non-increasing.
    pub singular_values: Option<Vec<f64>>,
    /// Right singular vectors as columns, d×r (SVD/PCA).
    pub right_vectors: Option<Matrix>,
    /// Column means removed before factorizing (PCA/ICA).
    pub mean: Option<DVector<f64>>,
    /// `‖A − reconstruct()‖_F` on the factorized matrix.
    pub reconstruction_error: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DecompositionMeta {
    method: Method,
    r: usize,
    seed: Option<u64>,
    error: f64,
    singular_values: Option<Vec<f64>>,
}

impl ConceptDecomposition {
    pub fn rank(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_instances(&self) -> usize {
        self.u.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    /// `U·W`, plus the stored mean when present.
    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_from(&self.u)
    }

    /// Maps arbitrary coefficients (rows of length r) back to the latent space.
    pub fn reconstruct_from(&self, coefficients: &Matrix) -> Matrix {
        let mut out = coefficients * &self.w;
        if let Some(mean) = &self.mean {
            linalg::add_row_vector(&mut out, mean);
        }
        out
    }

    /// Keeps only the listed concepts (columns of `U`, rows of `W`).
    pub fn select(&self, keep: &[usize]) -> (Matrix, Matrix) {
        (self.u.select_columns(keep), self.w.select_rows(keep))
    }

    /// Coefficients of new rows under this basis: least squares for
    /// orthogonal-basis methods, non-negative least squares per concept for
    /// NMF (the occlusion convention).
    pub fn project(&self, a: &Matrix) -> Result<Matrix> {
        if a.ncols() != self.dim() {
            return Err(Error::Shape(format!("rows of width {} for a basis of width {}", a.ncols(), self.dim())));
        }
        let centered = match &self.mean {
            Some(mean) => linalg::center_columns(a, mean),
            None => a.clone(),
        };
        match self.method {
            Method::Nmf => {
                let mut out = Matrix::zeros(a.nrows(), self.rank());
                for k in 0..self.rank() {
                    let wk: Vec<f64> = self.w.row(k).iter().cloned().collect();
                    for i in 0..a.nrows() {
                        let ai: Vec<f64> = centered.row(i).iter().cloned().collect();
                        out[(i, k)] = nnls_project(&ai, &wk)?;
                    }
                }
                Ok(out)
            }
            _ => {
                // Solve U·W = A in the least-squares sense: U = A·Wᵀ(W·Wᵀ)⁻¹.
                let gram = &self.w * self.w.transpose();
                let inv = gram
                    .try_inverse()
                    .ok_or_else(|| Error::invalid("concept basis is rank deficient"))?;
                Ok(centered * self.w.transpose() * inv)
            }
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        dataio::save_npy(dir.join("U.npy"), &self.u)?;
        dataio::save_npy(dir.join("W.npy"), &self.w)?;
        if let Some(mean) = &self.mean {
            dataio::save_npy(dir.join("mean.npy"), &Matrix::from_row_slice(1, mean.len(), mean.as_slice()))?;
        }
        if let Some(v) = &self.right_vectors {
            dataio::save_npy(dir.join("V.npy"), v)?;
        }
        let meta = DecompositionMeta {
            method: self.method,
            r: self.rank(),
            seed: self.seed,
            error: self.reconstruction_error,
            singular_values: self.singular_values.clone(),
        };
        dataio::write_json(dir.join("meta.json"), &meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: DecompositionMeta = dataio::read_json(dir.join("meta.json"))?;
        let u = dataio::load_npy(dir.join("U.npy"))?;
        let w = dataio::load_npy(dir.join("W.npy"))?;
        if u.ncols() != meta.r || w.nrows() != meta.r {
            return Err(Error::Shape(format!(
                "meta.json declares r={} but U is {}×{} and W is {}×{}",
                meta.r,
                u.nrows(),
                u.ncols(),
                w.nrows(),
                w.ncols()
            )));
        }
        let mean_path = dir.join("mean.npy");
        let mean = if mean_path.exists() {
            let m = dataio::load_npy(mean_path)?;
            Some(DVector::from_iterator(m.len(), m.iter().cloned()))
        } else {
            None
        };
        let v_path = dir.join("V.npy");
        let right_vectors = if v_path.exists() { Some(dataio::load_npy(v_path)?) } else { None };
        Ok(Self {
            u,
            w,
            method: meta.method,
            singular_values: meta.singular_values,
            right_vectors,
            mean,
            reconstruction_error: meta.error,
            seed: meta.seed,
        })
    }
}

pub(crate) fn check_rank(a: &Matrix, rank: usize) -> Result<()> {
    let max = a.nrows().min(a.ncols());
    if rank == 0 || rank > max {
        return Err(Error::Rank { rank, max });
    }
    Ok(())
}

/// Closed-form single-concept NNLS: `argmin_{c ≥ 0} ½‖a − c·w‖²`.
pub fn nnls_project(a: &[f64], w: &[f64]) -> Result<f64> {
    if a.len() != w.len() {
        return Err(Error::Shape(format!("vector of length {} vs basis row of length {}", a.len(), w.len())));
    }
    let ww: f64 = w.iter().map(|v| v * v).sum();
    if ww == 0.0 {
        return Err(Error::invalid("zero concept basis row"));
    }
    let aw: f64 = a.iter().zip(w).map(|(x, y)| x * y).sum();
    Ok((aw / ww).max(0.0))
}

/// Runs the named method with its defaults.
pub fn decompose(a: &ActivationMatrix, method: Method, rank: usize, seed: u64, nmf_iters: usize) -> Result<ConceptDecomposition> {
    match method {
        Method::Nmf => nmf(a, &NmfConfig { rank, iters: nmf_iters, seed }),
        Method::Svd => truncated_svd(a, rank),
        Method::Pca => pca(a, rank),
        Method::Ica => ica(a, &IcaConfig { rank, seed, ..IcaConfig::default() }),
    }
}
