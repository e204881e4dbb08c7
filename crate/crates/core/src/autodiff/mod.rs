//! Minimal tape-based reverse-mode automatic differentiation over dense
//! `f64` tensors.
//!
//! Every primitive records its operands on the [`Tape`]; [`Tape::backward`]
//! walks the tape once in reverse and accumulates vector-Jacobian
//! products, summing contributions at fan-out. Non-finite values are
//! rejected as soon as a primitive produces them.

mod tape;
mod tensor;

pub use tape::{log_sum_exp, Gradients, Tape, Var};
pub use tensor::Tensor;
