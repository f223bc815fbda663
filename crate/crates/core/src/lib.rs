//! Energy-based classical representations of quantum states.
//!
//! A quantum state measured with a product POVM induces a classical
//! distribution over outcome strings. This crate learns that distribution as
//! an energy-based model (EBM) using the Interaction Screening estimator,
//! samples the learned model with Gibbs sampling, and turns the samples back
//! into quantum estimates through the POVM dual frame.
//!
//! Module map:
//!
//! * [`qsim`] exact small-system states (thermal, ground, GHZ) and reference values
//! * [`povm`] single-qubit POVMs, dual frames, outcome tables and sampling
//! * [`families`] local-energy parametrizations (polynomial, neural, symmetric)
//! * [`ebm`] the energy model, its conditionals and the Gibbs sampler
//! * [`screen`] Interaction Screening losses and optimizers
//! * [`estimate`] observables, fidelities, reduced states, distances
//!
//! Conventions: qubit 0 is the least-significant bit of a basis index, and
//! measurement symbols are 0-based in memory but 1-based in every file format.

pub mod ebm;
pub mod error;
pub mod estimate;
pub mod families;
pub mod povm;
pub mod qsim;
pub mod screen;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
