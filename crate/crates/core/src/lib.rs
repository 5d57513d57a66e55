//! Deterministic desk-scale training engine for sparse model soups.
//!
//! The crate is split along the pipeline: a small feed-forward engine
//! ([`nn`]), synthetic data ([`data`]), mask construction ([`pruning`]),
//! retraining learning-rate schedules ([`schedules`]), model averaging
//! ([`merging`]), evaluation metrics ([`metrics`]), end-to-end methods
//! ([`orchestrator`]) and the binary checkpoint container ([`checkpoint`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod merging;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod pruning;
pub mod schedules;
pub mod seeding;

pub use error::{Error, Result};
