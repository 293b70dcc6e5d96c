//! Offline signature verification with a two-branch (global + regional) embedding
//! network trained by a co-tuplet metric loss.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod cotuplet;
pub mod dataset;
pub mod error;
pub mod imageprep;
pub mod mgrnet;
pub mod ndgrad;
pub mod seeds;
pub mod sigsynth;
pub mod train;
pub mod verifier;

pub use error::{Error, Result};
