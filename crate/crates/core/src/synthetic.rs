//! Seeded data families with known ground truth.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{ActivationMatrix, LabeledDataset};
use crate::error::{Error, Result};
use crate::{linalg, seed, Matrix};

/// Embeddings where the group and the task each live on one latent
/// direction, plus independent nuisance directions; all directions are
/// orthonormal in the ambient space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockFamilyConfig {
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub group_scale: f64,
    pub task_scale: f64,
    /// Standard deviations of the nuisance directions.
    pub nuisance_scales: Vec<f64>,
    /// Within-class spread on the group and task directions, relative to
    /// their scale.
    pub spread: f64,
    /// Isotropic noise on every ambient coordinate.
    pub noise: f64,
}

impl Default for BlockFamilyConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            dim: 8,
            seed: 0,
            group_scale: 3.0,
            task_scale: 2.0,
            nuisance_scales: vec![1.0, 0.7, 0.5],
            spread: 0.25,
            noise: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockFamily {
    pub activations: ActivationMatrix,
    pub dataset: LabeledDataset,
    /// Orthonormal rows: group direction, task direction, then nuisances.
    pub directions: Matrix,
}

impl BlockFamily {
    pub fn group_direction(&self) -> Vec<f64> {
        self.directions.row(0).iter().cloned().collect()
    }

    pub fn task_direction(&self) -> Vec<f64> {
        self.directions.row(1).iter().cloned().collect()
    }
}

pub fn block_family(cfg: &BlockFamilyConfig) -> Result<BlockFamily> {
    let latent = 2 + cfg.nuisance_scales.len();
    if cfg.dim < latent {
        return Err(Error::invalid(format!("dimension {} cannot hold {latent} latent directions", cfg.dim)));
    }
    if cfg.n < 4 {
        return Err(Error::invalid("need at least 4 instances"));
    }
    let mut rng = seed::stream(cfg.seed, "block-family");
    let basis = linalg::orthonormal_columns(linalg::random_normal(cfg.dim, cfg.dim, &mut rng));
    let directions = basis.columns(0, latent).transpose();
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    // Balanced (group, class) cells keep the two label blocks orthogonal in
    // the sample, not just in expectation.
    let mut cells: Vec<usize> = (0..cfg.n).map(|i| i % 4).collect();
    cells.shuffle(&mut rng);
    let g: Vec<usize> = cells.iter().map(|c| c / 2).collect();
    let y: Vec<usize> = cells.iter().map(|c| c % 2).collect();
    let mut coords = Matrix::zeros(cfg.n, latent);
    for i in 0..cfg.n {
        let sign = |b: usize| 2.0 * b as f64 - 1.0;
        coords[(i, 0)] = cfg.group_scale * (sign(g[i]) + cfg.spread * std.sample(&mut rng));
        coords[(i, 1)] = cfg.task_scale * (sign(y[i]) + cfg.spread * std.sample(&mut rng));
        for (k, s) in cfg.nuisance_scales.iter().enumerate() {
            coords[(i, 2 + k)] = s * std.sample(&mut rng);
        }
    }
    let mut data = coords * &directions;
    data.apply(|v| *v += cfg.noise * std.sample(&mut rng));
    Ok(BlockFamily {
        activations: ActivationMatrix::new(data)?,
        dataset: LabeledDataset::from_labels(&y, &g, 2)?,
        directions,
    })
}

/// Three classes whose features also carry the group; class 2 is rare in
/// group 1 and its group-1 members are pulled toward class 0, so a plain
/// classifier under-predicts class 2 for group 1. Class 0 is the largest
/// class of group 1, which keeps the cost of correcting class 2 spread
/// thinly over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedFamilyConfig {
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    /// Class priors per group.
    pub priors: [[f64; 3]; 2],
    /// Fraction of the way from the class-2 centre to the class-0 centre
    /// that group-1 class-2 instances are moved.
    pub shift: f64,
    pub group_signal: f64,
    pub spread: f64,
}

impl Default for BiasedFamilyConfig {
    fn default() -> Self {
        Self {
            n: 3000,
            dim: 6,
            seed: 0,
            priors: [[0.4, 0.3, 0.3], [0.7, 0.24, 0.06]],
            shift: 0.35,
            group_signal: 1.0,
            spread: 0.5,
        }
    }
}

pub fn biased_family(cfg: &BiasedFamilyConfig) -> Result<(ActivationMatrix, LabeledDataset)> {
    if cfg.dim < 3 {
        return Err(Error::invalid("biased family needs at least 3 dimensions"));
    }
    let mut rng = seed::stream(cfg.seed, "biased-family");
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let centres = [[0.0, 0.0], [2.0, 0.0], [1.0, 1.75]];
    let mut y = Vec::with_capacity(cfg.n);
    let mut g = Vec::with_capacity(cfg.n);
    let mut data = Matrix::zeros(cfg.n, cfg.dim);
    for i in 0..cfg.n {
        let gi = rng.random_range(0..2);
        let u: f64 = rng.random();
        let p = cfg.priors[gi];
        let yi = if u < p[0] { 0 } else if u < p[0] + p[1] { 1 } else { 2 };
        let mut centre = centres[yi];
        if gi == 1 && yi == 2 {
            for (c, target) in centre.iter_mut().zip(centres[0]) {
                *c += cfg.shift * (target - *c);
            }
        }
        data[(i, 0)] = centre[0] + cfg.spread * std.sample(&mut rng);
        data[(i, 1)] = centre[1] + cfg.spread * std.sample(&mut rng);
        data[(i, 2)] = cfg.group_signal * (2.0 * gi as f64 - 1.0) + cfg.spread * std.sample(&mut rng);
        for j in 3..cfg.dim {
            data[(i, j)] = std.sample(&mut rng);
        }
        y.push(yi);
        g.push(gi);
    }
    Ok((ActivationMatrix::new(data)?, LabeledDataset::from_labels(&y, &g, 3)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_family_shapes_and_directions() {
        let fam = block_family(&BlockFamilyConfig { n: 100, ..Default::default() }).unwrap();
        assert_eq!(fam.activations.nrows(), 100);
        assert_eq!(fam.activations.ncols(), 8);
        let gram = &fam.directions * fam.directions.transpose();
        assert!((gram - Matrix::identity(5, 5)).abs().max() < 1e-12);
        let again = block_family(&BlockFamilyConfig { n: 100, ..Default::default() }).unwrap();
        assert_eq!(again.activations, fam.activations);
    }

    #[test]
    fn block_family_rejects_small_dimension() {
        assert!(block_family(&BlockFamilyConfig { dim: 4, ..Default::default() }).is_err());
    }

    #[test]
    fn biased_family_has_rare_class_in_group_one() {
        let (a, ds) = biased_family(&BiasedFamilyConfig::default()).unwrap();
        assert_eq!(a.nrows(), ds.len());
        let counts = ds.cell_counts();
        let c = |y, g| *counts.get(&(y, g)).unwrap_or(&0) as f64;
        assert!(c(2, 1) / (c(0, 1) + c(1, 1) + c(2, 1)) < c(2, 0) / (c(0, 0) + c(1, 0) + c(2, 0)));
    }
}
