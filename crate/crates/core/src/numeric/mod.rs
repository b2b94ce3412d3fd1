//! Dense double-precision kernels with reverse-mode gradients.

mod checkpoint;
mod gemm;
mod gradcheck;
pub mod nn;
mod tape;
mod tensor;

use thiserror::Error;

pub use checkpoint::{read_params, to_bytes, write_params};
pub use gradcheck::{grad_check, GradCheckReport};
pub use nn::{linear, softmax};
pub use tape::{softmax_in_place, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Grads, ParamId, ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input to softmax")]
    NaNInput,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
