//! Functional Itô calculus on discretized càdlàg paths.
//!
//! The crate provides stopped paths on a uniform grid, a catalog of
//! non-anticipative functionals, finite-difference horizontal and vertical
//! derivatives, a semimartingale model catalog with simulators and
//! differential characteristics, residual checks for the functional Itô
//! formula and the path-dependent backward equation, and numerical checks of
//! comparison theorems between two semimartingale models.

pub mod backwards;
pub mod calculus;
pub mod comparison;
pub mod error;
pub mod functionals;
pub mod models;
pub mod pathspace;

pub use error::{Error, Result};
