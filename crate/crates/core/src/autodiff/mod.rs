//! Minimal reverse-mode differentiation and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{
    AdamConfig, AdamState, GradSet, ParamSet, ADAM_EPSILON, DEFAULT_BETA1, DEFAULT_BETA2,
    DEFAULT_WEIGHT_DECAY,
};
pub use tape::{Tape, Var, COSINE_EPS};
pub use tensor::{softmax, softmax_rows, Tensor};
