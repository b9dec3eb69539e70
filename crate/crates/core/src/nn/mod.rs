//! Minimal differentiable building blocks for the trainable heads.

pub mod gradcheck;
pub mod params;
pub mod tape;

pub use params::{Bound, ParamStore};
pub use tape::{Grads, Tape, Var};
