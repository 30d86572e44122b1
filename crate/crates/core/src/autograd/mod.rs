//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every primitive appends one node holding its forward value. Because the
//! tape is append-only, walking it backwards from the loss visits each node
//! in reverse topological order exactly once. Gradients accumulate, so a
//! value used twice receives the sum of both contributions.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, grad_check_store, grad_check_with, GradCheckOptions, GradCheckReport};
pub use kernels::{gelu_scalar, softmax_in_place, ConvSpec, LAYER_NORM_EPS};
pub use tape::{Gradients, Tape, Var};
