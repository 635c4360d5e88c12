//! Shared inputs for the benchmarks.

use latent_audit::synthetic::{block_family, BlockFamily, BlockFamilyConfig};
use latent_audit::{linalg, seed, ActivationMatrix, Matrix};

/// Non-negative n×d matrix with entries in [0, 1).
pub fn non_negative(n: usize, d: usize, s: u64) -> ActivationMatrix {
    let a = linalg::random_normal(n, d, &mut seed::rng(s)).map(|v| (v.abs() / 4.0).min(0.999));
    ActivationMatrix::new(a).expect("finite entries")
}

pub fn gaussian(n: usize, d: usize, s: u64) -> Matrix {
    linalg::random_normal(n, d, &mut seed::rng(s))
}

pub fn family(n: usize, dim: usize) -> BlockFamily {
    block_family(&BlockFamilyConfig { n, dim, seed: 1, ..BlockFamilyConfig::default() }).expect("valid config")
}
