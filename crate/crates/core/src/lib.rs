//! Dynamic defense selection for ML-based intrusion detection.
//!
//! The pipeline: preprocess tabular data, train a baseline MLP, perturb the
//! test split with six attacks across an epsilon grid, train nine defenses,
//! learn a per-sample defense router, and score the router against
//! no-defense, random, best-static, and oracle baselines.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod nn;
pub mod router;
pub mod seeding;

pub use error::{Error, Result};
