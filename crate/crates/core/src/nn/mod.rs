//! Dense tensor math with reverse-mode differentiation and Adam.

mod graph;
pub mod kernels;
pub mod logistic;
mod ops;
mod optim;

pub use graph::{project_values, Gradients, Graph, Var};
pub use ops::{conv2d, conv_transpose2d, quantize_value, relu, round_half_away};
pub use optim::{AdamConfig, AdamState, Parameter};

pub mod gradcheck;
