//! Dense `f64` tensors and a reverse-mode tape with the primitives needed by
//! the backbone, the adapters and the clustering math.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_multi};
pub use kernels::softmax_rows;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
