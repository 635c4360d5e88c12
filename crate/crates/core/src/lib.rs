//! Latent-space audit engine for text classifiers.
//!
//! The crate discovers concepts in an embedding matrix (NMF, truncated SVD,
//! PCA, ICA), ranks them with total Sobol indices for a task head and a
//! sensitive-attribute head, removes the concepts that carry the sensitive
//! attribute, and measures group fairness. It also ships a fair training loop
//! that penalizes the Wasserstein-2 distance between per-class score
//! distributions of two groups.

pub mod attribute;
pub mod dataio;
pub mod decompose;
pub mod embed;
pub mod error;
pub mod fairmetrics;
pub mod linalg;
pub mod probes;
pub mod seed;
pub mod sobol;
pub mod synthetic;
pub mod taco;
pub mod textprep;
pub mod w2reg;

pub use dataio::{ActivationMatrix, Dtype, Instance, LabeledDataset, SplitSpec};
pub use decompose::{ConceptDecomposition, Method};
pub use probes::{MlpHead, TrainConfig};
pub use sobol::ImportanceReport;
pub use error::{Error, Result};

/// Dense row-major-agnostic matrix type used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
