//! Variational continual learning over mean-field Gaussian networks.
//!
//! The crate implements the VCL objective together with its two multi-anchor
//! generalizations — n-step KL regularization and the TD(lambda) objective —
//! plus the benchmark harness (permuted / split task streams, restricted
//! replay) and a conjugate linear-Gaussian oracle used to validate the
//! posterior recursion and measure approximation drift.

pub mod checks;
pub mod error;
pub mod evalreport;
pub mod net;
pub mod numcore;
pub mod objectives;
pub mod oracle;
pub mod tasks;
pub mod trainer;
pub mod vardist;

pub use error::{CoreError, Result};
