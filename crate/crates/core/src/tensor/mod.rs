//! Dense tensors, the differentiation tape, and gradient verification.

pub mod archive;
mod dense;
pub mod gradcheck;
mod params;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{check_params, finite_diff_check, ParamCheck};
pub use params::{init_identity_noise, init_kernel, ParamStore, Parameter};
pub use tape::{resize_nearest, Gradients, Padding, ParamId, Tape, Var, LOG_CLAMP};
