//! Minimal tensor autodiff and transformer building blocks.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod transformer;

pub use params::{Bound, ParamStore};
pub use tape::{AttnLayout, Grads, Tape, Var};
