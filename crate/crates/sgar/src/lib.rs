//! Self-supervised generative assisted ranking (SGAR) for deep metric
//! learning, end to end in pure Rust:
//!
//! - latent-space synthesis of intra-class variant families with graded
//!   strength ([`synthesis`]),
//! - smooth intra-class ranking losses with analytic gradients plus a
//!   Proxy-Anchor metric baseline ([`losses`]),
//! - a small trainable encoder/projector with manual backprop and AdamW
//!   ([`model`]),
//! - retrieval evaluation: Recall@K and Spearman rank preservation
//!   ([`eval`]),
//! - dataset loading, synthetic data generation, and balanced batch
//!   sampling ([`data`]),
//! - command implementations shared by the `sgar` binary and the examples
//!   ([`cli`]).
//!
//! See the `examples/` directory for a runnable walkthrough of each
//! capability.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod synthesis;

pub use config::{HyperParams, RunConfig, SyntheticConfig};
pub use error::{Result, SgarError};
