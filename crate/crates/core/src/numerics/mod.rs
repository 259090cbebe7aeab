//! Dense 64-bit matrices and a reverse-mode gradient tape.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, clamped_ln, dot, Tensor2, LOG_FLOOR, MIN_ROW_NORM};
