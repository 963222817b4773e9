//! Desk-scale active perceptual querying.
//!
//! A small decoder learns to emit decision tokens (`<query_depth>`, ...)
//! inside its reasoning chain. Each decision token reserves `N` observation
//! slots whose hidden states are projected into an expert's feature space and,
//! during training, aligned with a frozen expert's output. At inference no
//! expert runs: the slots' hidden states are the simulated perception.

pub mod curriculum;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod grammar;
pub mod losses;
pub mod model;
pub mod projection;
pub mod world;

pub use error::{Error, Result};
