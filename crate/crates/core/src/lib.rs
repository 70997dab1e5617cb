//! Structured Gaussian filtering for hybrid two-slice temporal Bayes nets.
//!
//! The belief state is a labeled Gaussian. Each transition is propagated CPD by
//! CPD in topological order: linear CPDs exactly, nonlinear ones by local
//! cubature over their own parents, followed by a covariance repair that keeps
//! the joint positive definite.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gaussian;
pub mod model;
pub mod plant;
pub mod psd_repair;
pub mod quadrature;
pub mod tracker;

pub use error::{Error, Result};
pub use gaussian::Gaussian;
pub use model::{Cpd, Input, Modes, Role, Tbn, TbnBuilder};
pub use quadrature::{CubatureRule, Precision};
