//! Corrects the optimizer of a low-fidelity PDE-constrained optimization
//! problem using a handful of high-fidelity evaluations: Bayesian calibration
//! of an affine model-discrepancy surrogate, pseudo-time continuation of the
//! post-optimality update, and sequential A-optimal acquisition of evaluation
//! points.

pub mod calibration;
pub mod discrepancy;
pub mod error;
pub mod harness;
pub mod oed;
pub mod postopt;
pub mod problems;
pub mod spaces;

#[cfg(test)]
pub(crate) mod test_oracles;

pub use error::{Error, Result};
