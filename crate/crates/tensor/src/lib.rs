//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s; a single
//! [`Graph::backward`] sweep then yields gradients for all trainable
//! leaves. Parameters live in a [`ParamStore`] outside the graph and are
//! bound onto a fresh graph for every forward pass, so graphs are cheap,
//! single-use and confined to the worker that built them.
//!
//! Binary elementwise ops broadcast with trailing-axis alignment: shapes
//! are right-aligned, missing leading axes count as 1, and each axis pair
//! must match or contain a 1.

mod composite;
mod error;
mod graph;
mod ops;
mod real;
mod shape;
mod tensor;

pub mod check;
pub mod optim;
pub mod param;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use ops::bilinear_taps;
pub use optim::{clip_global_norm, global_norm, AdamConfig, AdamState};
pub use param::{xavier_uniform, Bound, Param, ParamId, ParamStore};
pub use real::Real;
pub use shape::broadcast_shape;
pub use tensor::Tensor;
