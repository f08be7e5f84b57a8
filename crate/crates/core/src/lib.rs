//! Discrete diffusion over finite vocabularies: forward processes, a small
//! reverse-mode autodiff engine, tiny sequence denoisers, training losses,
//! reverse-time samplers, inverse distillation, and exact enumeration oracles.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod distill;
pub mod duo;
pub mod error;
pub mod loss;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod process;
pub mod quadrature;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
