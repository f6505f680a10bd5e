//! Deterministic simulator for committee-validated federated learning on a
//! hash-linked chain: stake-weighted role election, local SGD, cross-validated
//! loss scoring, softmax aggregation with robust baselines, label-flipping
//! adversaries, and numerical checks of the convergence theory.

pub mod adversary;
pub mod aggregation;
pub mod analysis;
pub mod chain;
pub mod data;
pub mod error;
pub mod models;
pub mod protocol;
pub mod seeds;

pub use error::{Result, SimError};
