//! Small deterministic reverse-mode autodiff core.
//!
//! Every forward pass builds a fresh [`Graph`]; parameters are copied in from a
//! [`ParameterStore`] by name and their gradients are copied back out after
//! [`Graph::backward`].

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod store;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{sigmoid, BatchMoments, BnMode, Fault, Gradients, Graph, Var, BN_EPS, NORM_EPS};
pub use store::{AdamConfig, Param, ParameterStore, BN_MOMENTUM};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `sum_i (u_i - v_i)^2`.
pub fn sq_euclidean(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("sq_euclidean", format!("lengths {} and {}", u.len(), v.len())));
    }
    Ok(u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum())
}
