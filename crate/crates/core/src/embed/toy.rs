use serde::{Deserialize, Serialize};

use crate::dataio::ActivationMatrix;
use crate::embed::{EmbedRequest, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::{linalg, seed, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub dim: usize,
    pub seed: u64,
    pub vocab_hash_buckets: usize,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self { dim: 16, seed: 0, vocab_hash_buckets: 1024 }
    }
}

/// `ReLU(P · bag(text))` with a seeded Gaussian projection `P` and a hashed
/// bag of words. Masked tokens are left out of the bag.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    buckets: usize,
    projection: Matrix,
}

impl ToyEncoder {
    pub fn new(cfg: ToyEncoderConfig) -> Result<Self> {
        if cfg.dim < 2 {
            return Err(Error::invalid("toy encoder dimension must be at least 2"));
        }
        if cfg.vocab_hash_buckets == 0 {
            return Err(Error::invalid("toy encoder needs at least one hash bucket"));
        }
        let mut rng = seed::stream(cfg.seed, "toy-encoder");
        let projection = linalg::random_normal(cfg.dim, cfg.vocab_hash_buckets, &mut rng);
        Ok(Self { buckets: cfg.vocab_hash_buckets, projection })
    }

    /// Uses an explicit `dim × buckets` projection.
    pub fn from_projection(projection: Matrix) -> Result<Self> {
        if projection.nrows() < 2 || projection.ncols() == 0 {
            return Err(Error::invalid("projection must be at least 2 × 1"));
        }
        Ok(Self { buckets: projection.ncols(), projection })
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn bucket(&self, token: &str) -> usize {
        (seed::fnv1a(token.as_bytes()) % self.buckets as u64) as usize
    }

    /// Hashed token counts, skipping tokens whose flag is set.
    pub fn bag(&self, tokens: &[String], masked: &[bool]) -> Vec<f64> {
        let mut bag = vec![0.0; self.buckets];
        for (j, tok) in tokens.iter().enumerate() {
            if !masked.get(j).copied().unwrap_or(false) {
                bag[self.bucket(tok)] += 1.0;
            }
        }
        bag
    }

    /// `P · bag` before the ReLU.
    pub fn pre_activation(&self, tokens: &[String], masked: &[bool]) -> Vec<f64> {
        let bag = self.bag(tokens, masked);
        let mut out = vec![0.0; self.dim()];
        for (b, count) in bag.iter().enumerate() {
            if *count != 0.0 {
                for (o, p) in out.iter_mut().zip(self.projection.column(b).iter()) {
                    *o += count * p;
                }
            }
        }
        out
    }
}

impl EmbeddingProvider for ToyEncoder {
    fn embed(&self, req: &EmbedRequest) -> Result<ActivationMatrix> {
        req.validate()?;
        let flags = req.mask_flags();
        let mut data = Matrix::zeros(req.texts.len(), self.dim());
        for (i, (tokens, masked)) in req.texts.iter().zip(&flags).enumerate() {
            for (j, v) in self.pre_activation(tokens, masked).into_iter().enumerate() {
                data[(i, j)] = v.max(0.0);
            }
        }
        ActivationMatrix::new(data)
    }
}
