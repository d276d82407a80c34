//! Differentiable dense-tensor kernels and the reverse-mode tape that chains them.

pub mod bntt;
pub mod conv;
pub mod params;
pub mod tape;

#[cfg(test)]
mod gradcheck;

pub use bntt::{BnttState, Mode, RunningStats};
pub use conv::ConvGeom;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
