//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation as it runs; [`Value`] is a cheap
//! handle into it. Each training step builds a fresh tape and drops it.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{softmax_scalar, softmin, Tape, Value};
pub use tensor::Tensor;
