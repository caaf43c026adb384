//! Graph augmentation for fraud detection.
//!
//! The pipeline breaks camouflaged neighborhoods into random node groups,
//! learns a supervised contrastive embedding, generates homophilic auxiliary
//! relations with a guided denoising diffusion model over group adjacency
//! matrices, enriches them with Personalized PageRank, and scores nodes with
//! a weighted multi-relation beta-wavelet detector.

pub mod checkpoint;
pub mod datasets;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod gcl;
pub mod graph;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod ppr;
pub mod sampler;

pub use error::{ErrorClass, GradError, Result};
pub use graph::{MultiRelationGraph, SparseAdjacency};
pub use numeric::{AdamState, Matrix};
