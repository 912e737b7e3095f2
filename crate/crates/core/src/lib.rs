// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjacency;
pub mod cli;
pub mod critical;
pub mod empath;
pub mod error;
pub mod flow;
mod kernel;
pub mod linalg;
pub mod manifold;
pub mod perm;
pub mod spectra;
pub mod stochastic;

pub use error::{IsoflowError, Result};
