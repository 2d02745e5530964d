//! Dense tensors, the differentiation tape, parameter storage and the
//! finite-difference oracle used to check every differentiable op.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_params};
pub use params::{Bindings, Initializer, LayerNorm, Linear, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{
    cosine, gelu, l2_norm, log_sigmoid, log_softmax_rows, sigmoid, softmax_rows, Tensor,
};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;
