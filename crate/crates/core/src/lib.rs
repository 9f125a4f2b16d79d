//! Clustering of precomputed embeddings by semantic pseudo-labeling.
//!
//! The pipeline trains light-weight classifier heads on prototype-derived
//! pseudo-labels ([`self_train`]), keeps samples whose neighborhoods agree
//! with their labels ([`reliability`]), and retrains a fresh classifier with
//! confidence-thresholded consistency training ([`semi`]). [`metrics`] and
//! [`kmeans`] provide evaluation and a baseline.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod head;
pub mod kmeans;
pub mod loss;
pub mod metrics;
pub mod numeric;
pub mod optim;
pub mod pseudo;
pub mod registry;
pub mod reliability;
pub mod self_train;
pub mod semi;

pub use data::{EmbeddingDataset, FileFormat, Strength, SynthSpec, TransformConfig};
pub use error::{Result, SpiceError};
pub use metrics::ClusterEval;
pub use head::Mlp;
pub use numeric::{Matrix, RngState};
pub use registry::StrategySpec;
