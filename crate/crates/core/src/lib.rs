//! Transient-stability benchmarking for networked synchronous machines.
//!
//! The crate integrates a third-order machine model on a lossless network,
//! drives it with distributed frequency controllers (proportional local,
//! integral local and gather-and-broadcast), and computes a centralized
//! optimal control by piecewise-constant control parametrization with
//! discrete adjoint gradients and an augmented-Lagrangian solver. The
//! [`bench`] module ties everything into scenario files and reports.
//!
//! Node indices are zero-based throughout the API; CSV column names are
//! one-based (`theta_1`, `omega_1`, ...).

pub mod bench;
pub mod controllers;
pub mod error;
pub mod grid_model;
pub mod metrics;
pub mod optimal_control;
pub mod simulate;

pub use error::{Error, Result};
