//! Sparse-gauge strain-field reconstruction.
//!
//! Twelve gauge readings are mapped by a tanh MLP onto the leading PCA
//! coefficients of a full strain grid. The network is pre-trained with Adam
//! on a mode-weighted Gaussian likelihood, then its weights are sampled with
//! Hamiltonian Monte Carlo so that each prediction carries an aleatoric and an
//! epistemic uncertainty field.

pub mod error;
pub mod field;
pub mod io;
pub mod linalg;
pub mod synth;
pub mod uq;
pub mod bnn;
pub mod hmc;
pub mod config;
pub mod pipeline;
pub mod study;

pub use error::{Result, ShmError};
