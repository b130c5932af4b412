//! A small reverse-mode differentiable array engine.
//!
//! Operations are recorded eagerly on a [`Graph`] tape; [`Graph::backward`]
//! propagates gradients from a scalar to every leaf that requires them.
//! Trainable tensors live in a [`ParamStore`] and are updated with
//! [`AdamState`]. All reductions run in a fixed order, so results are
//! bit-reproducible for identical inputs.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
mod ops;
pub mod optim;
pub mod params;
pub mod real;
pub mod suite;
pub mod tensor;

pub use error::{ArrayError, Result};
pub use gradcheck::{finite_diff_check, finite_diff_check_at, finite_diff_check_params};
pub use graph::{Graph, Var};
pub use nn::{multi_head_attention, LayerNorm, Linear, MultiHeadAttention};
pub use optim::{adam_step, AdamState};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use real::{DType, Real};
pub use tensor::Tensor;
