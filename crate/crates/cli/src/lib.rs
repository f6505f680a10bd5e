//! Library behind the `fedchain` binary: config loading, the batch driver,
//! report generation, and the convergence checker.

pub mod config;
pub mod convergence;
pub mod report;
