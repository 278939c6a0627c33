//! Weak approximation of Stratonovich SDEs by tree-based cubature, with
//! high-order recombination to keep the support of the discrete measures
//! polynomial in the number of time steps.

pub mod error;
pub mod fields;
pub mod harness;
pub mod measures;
pub mod patching;
pub mod recombine;
pub mod schemes;
pub mod svg;

pub use error::{Error, Result};
