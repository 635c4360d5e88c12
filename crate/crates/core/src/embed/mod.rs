//! Embedding providers: the function mapping token sequences to latent rows.
//!
//! [`ToyEncoder`] is a deterministic in-process encoder used by tests and the
//! synthetic fixtures; [`HttpEmbedder`] talks to an external sidecar that
//! serves a real transformer. Both honour masked-token requests, which the
//! occlusion attribution relies on.

mod http;
mod toy;

pub use http::{EmbedResponse, HealthStatus, HttpConfig, HttpEmbedder};
pub use toy::{ToyEncoder, ToyEncoderConfig};

use serde::{Deserialize, Serialize};

use crate::dataio::ActivationMatrix;
use crate::error::{Error, Result};

/// Texts to embed, with optional `(text index, token index)` pairs naming
/// tokens to drop before embedding.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<Vec<String>>,
    #[serde(default)]
    pub masked: Vec<(usize, usize)>,
}

impl EmbedRequest {
    pub fn new(texts: Vec<Vec<String>>) -> Self {
        Self { texts, masked: Vec::new() }
    }

    pub fn with_masked(mut self, masked: Vec<(usize, usize)>) -> Self {
        self.masked = masked;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for &(t, j) in &self.masked {
            let len = self
                .texts
                .get(t)
                .ok_or_else(|| Error::invalid(format!("masked text index {t} out of range")))?
                .len();
            if j >= len {
                return Err(Error::invalid(format!("masked token {j} out of range for text {t} ({len} tokens)")));
            }
        }
        Ok(())
    }

    /// Per text, a flag for each token telling whether it is masked.
    pub fn mask_flags(&self) -> Vec<Vec<bool>> {
        let mut flags: Vec<Vec<bool>> = self.texts.iter().map(|t| vec![false; t.len()]).collect();
        for &(t, j) in &self.masked {
            flags[t][j] = true;
        }
        flags
    }
}

/// Anything that can turn an [`EmbedRequest`] into one row per text.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, req: &EmbedRequest) -> Result<ActivationMatrix>;
}
