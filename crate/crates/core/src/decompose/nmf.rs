use rand::Rng;

use super::{check_rank, ConceptDecomposition, Method};
use crate::dataio::ActivationMatrix;
use crate::error::{Error, Result};
use crate::{linalg, seed, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NmfConfig {
    pub rank: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self { rank: 10, iters: 500, seed: 0 }
    }
}

/// Lee–Seung multiplicative-update NMF on the Frobenius objective.
pub fn nmf(a: &ActivationMatrix, cfg: &NmfConfig) -> Result<ConceptDecomposition> {
    nmf_traced(a, cfg).map(|(dec, _)| dec)
}

/// Like [`nmf`], also returning `½‖A − UW‖²` after initialization and after
/// every iteration.
pub fn nmf_traced(a: &ActivationMatrix, cfg: &NmfConfig) -> Result<(ConceptDecomposition, Vec<f64>)> {
    if let Some((row, col, value)) = a.first_negative() {
        return Err(Error::NegativeInput { row, col, value });
    }
    let a = a.data();
    check_rank(a, cfg.rank)?;
    let (n, d, r) = (a.nrows(), a.ncols(), cfg.rank);

    let mut rng = seed::stream(cfg.seed, "nmf-init");
    let scale = (a.mean() / r as f64).sqrt();
    // Uniform on (0, 1]: zero entries would stay zero forever under MU.
    let mut draw = |rows, cols| Matrix::from_fn(rows, cols, |_, _| (1.0 - rng.random::<f64>()) * scale);
    let mut u = draw(n, r);
    let mut w = draw(r, d);
    if scale == 0.0 {
        u.fill(0.0);
        w.fill(0.0);
    }

    let objective = |u: &Matrix, w: &Matrix| 0.5 * linalg::frobenius(&(a - u * w)).powi(2);
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    trace.push(objective(&u, &w));
    let at = a.transpose();
    for _ in 0..cfg.iters {
        let num = u.transpose() * a;
        let den = (u.transpose() * &u) * &w;
        multiplicative_step(&mut w, &num, &den);
        let num = (&w * &at).transpose();
        let den = &u * (&w * w.transpose());
        multiplicative_step(&mut u, &num, &den);
        trace.push(objective(&u, &w));
    }

    let error = linalg::frobenius(&(a - &u * &w));
    let dec = ConceptDecomposition {
        u,
        w,
        method: Method::Nmf,
        singular_values: None,
        right_vectors: None,
        mean: None,
        reconstruction_error: error,
        seed: Some(cfg.seed),
    };
    Ok((dec, trace))
}

fn multiplicative_step(x: &mut Matrix, num: &Matrix, den: &Matrix) {
    for ((x, &n), &d) in x.iter_mut().zip(num.iter()).zip(den.iter()) {
        if d > 0.0 {
            *x *= n / d;
        }
    }
}
