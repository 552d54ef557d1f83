//! Synthetic control estimation and inference that stays valid when the
//! treatment spills over onto control units.

pub mod cli;
pub mod dgp;
pub mod error;
pub mod inference;
pub mod montecarlo;
pub mod panel;
pub mod scm;
pub mod solver;
pub mod spillover;

pub use error::{Error, Result};
