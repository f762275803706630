//! Reverse-mode differentiable tensor engine.
//!
//! A [`Graph`] records one forward pass over a closed set of operations;
//! [`Graph::backward`] walks it in reverse and returns [`Gradients`] for every
//! trainable parameter and differentiable input. Parameters live in a
//! [`ParamStore`] and carry a freeze flag: frozen tensors never receive a
//! gradient and are never changed by [`adam_step`].

mod backward;
mod gemm;
mod gradcheck;
mod graph;
mod optim;
mod real;
mod tensor;

pub use backward::Gradients;
pub use gradcheck::{finite_difference_check, relative_error};
pub use graph::{Axis, Graph, Var, LN_EPS};
pub use optim::{adam_step, AdamConfig, AdamState, DEFAULT_LR};
pub use real::Real;
pub use tensor::{ParamId, ParamStore, Tensor};

