//! Stochastic maximum principle toolkit for controlled stochastic evolution
//! equations on a spectral Galerkin truncation.

pub mod adjoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod forward;
pub mod galerkin;
pub mod hamiltonian;
pub mod numdiff;
pub mod optimizer;
pub mod problem;
pub mod regression;
pub mod stats;
pub mod variational;

pub use error::{Result, SmpError};
