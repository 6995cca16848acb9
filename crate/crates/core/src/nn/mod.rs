//! Minimal CNN toolkit: tape autodiff, layers, parameter stores and Adam.

pub(crate) mod kernels;
pub mod layers;
pub mod optim;
mod params;
mod tape;

pub use optim::{Adam, OptimizerConfig, Schedule};
pub use params::{fingerprint, Bound, ParamDecl, ParamMeta, ParamStore};
pub use tape::{Gradients, Tape, Var};
