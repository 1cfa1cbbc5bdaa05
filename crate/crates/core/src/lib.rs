//! Numerical laboratory for optimal control problems with Lie-group symmetry.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod integrator;
pub mod io;
pub mod lie;
pub mod ocp;
pub mod pipeline;
pub mod static_solver;
pub mod svg;
pub mod systems;
pub mod turnpike;

pub use error::{Error, Result};
