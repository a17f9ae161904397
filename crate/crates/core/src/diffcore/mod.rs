//! Deterministic differentiable computation: dense matrices, a reverse-mode
//! tape, small MLPs, gradient checking and an adaptive-moment optimizer.

mod adam;
mod check;
mod matrix;
mod mlp;
mod tape;

pub use adam::{AdamConfig, OptimizerState};
pub use check::{evaluate, finite_difference_check, value_and_gradients};
pub use matrix::Matrix;
pub use mlp::{Activation, BoundMlp, Layer, Mlp};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
