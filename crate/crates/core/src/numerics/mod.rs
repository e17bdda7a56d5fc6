//! Dense matrices, forward kernels, the gradient tape and finite-difference checks.

pub mod gradcheck;
pub mod kernels;
pub mod matrix;
pub mod tape;

pub use kernels::{
    activate, cosine, layer_norm, linear, mlp, norm, sinusoidal, softmax, Activation, Axis,
    LinearParams, MlpLayer, MlpSpec,
};
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};
