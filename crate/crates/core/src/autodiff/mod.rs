//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Trainable parameters live
//! in a [`ParamStore`] outside the tape and are bound as leaves at the start
//! of each pass with [`ParamStore::bind`].

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{gradient_check, relative_error, DEFAULT_EPS};
pub use params::{ParamId, ParamStore, ParamVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
