//! Reverse-mode automatic differentiation over dense `f64` matrices.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use params::ParamStore;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
