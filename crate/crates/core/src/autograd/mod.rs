//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! already topologically sorted; [`Tape::backward`] walks it once in reverse.

mod gradcheck;
mod tape;

pub use gradcheck::{gradient_check, gradient_check_with, Difference, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

pub(crate) fn tape_var(index: usize) -> Var {
    tape::var_at(index)
}
