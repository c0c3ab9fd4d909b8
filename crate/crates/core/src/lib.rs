//! Longitudinal trajectory clustering.
//!
//! Modules, roughly in pipeline order:
//!
//! * [`data`]: trajectories, CSV ingestion, grid alignment, partitions, ARI.
//! * [`synthgen`]: the synthetic seven-group adherence generator.
//! * [`crosssec`]: longitudinal k-means and latent profile analysis on aligned data.
//! * [`distance`]: Euclidean distances, hierarchical clustering, k-medoids, silhouettes.
//! * [`features`]: per-subject polynomial features and feature-based clustering.
//! * [`mixture`]: group-based trajectory models and growth mixture models.
//! * [`selection`]: BIC, entropy, elbow and the cluster-count sweep.
//! * [`cli`]: the `trajcluster` command-line front end.

pub mod cli;
pub mod crosssec;
pub mod data;
pub mod distance;
pub mod error;
pub mod features;
pub mod mixture;
pub mod rng;
pub mod selection;
mod stats;
pub mod synthgen;

pub use error::{Error, Result};

/// Crate version reported by the CLI and embedded in model files.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
