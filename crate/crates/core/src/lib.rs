//! Unified sequential search and recommendation.
//!
//! A dual-branch transformer encoder shared between the product and query
//! views of search behavior and the product view of recommendation behavior,
//! with learnable intent-oriented sessions and a self-supervised session
//! loss. The crate also carries the data pipeline, training loop, ranking
//! metrics and ablation runner around the model.

pub mod ablation;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod predictor;
pub mod seeding;
pub mod session;
pub mod train;

pub use error::{Error, Result};
