//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation eagerly (values are computed when the op is
//! added) and [`Graph::backward`] walks the tape once in reverse. Graphs are built
//! fresh for every step and dropped afterwards.

mod graph;
mod gradcheck;
mod nn;
mod optim;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use graph::{Grads, Graph, Var};
pub use nn::{Activation, LayerNorm, Linear, Mlp, ParamStore};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
