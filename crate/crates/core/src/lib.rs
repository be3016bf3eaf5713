//! Context-aware re-ranking of music recommendations using audio-feature
//! preference models.

pub mod analysis;
pub mod config;
pub mod context;
pub mod error;
pub mod evaluation;
pub mod feature_space;
pub mod ingestion;
pub mod pipeline;
pub mod preference;
pub mod recommenders;
pub mod rerank;

pub use error::{Error, Result};
