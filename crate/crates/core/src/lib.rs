//! Desk-scale simulator of federated self-distillation with dual-stream
//! rectification.
//!
//! A tiny frozen next-token predictor carries two low-rank adapter streams:
//! a smoothing stream trained on self-distilled responses that never leaves
//! the client, and a rectification stream trained on raw responses that is
//! the only thing the server aggregates.

pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub use math::Matrix;

/// Token id.
pub type Token = u32;
