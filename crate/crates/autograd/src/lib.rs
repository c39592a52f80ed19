//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! `f64` arrays; parameters live in a [`ParamStore`] and are copied onto the
//! tape when referenced, so a tape never aliases mutable model state.
//! [`Tape::backward`] walks the tape once in reverse and returns the
//! gradients of a scalar with respect to every parameter and every input
//! leaf that asked for one.

mod conv;
pub mod nn;
mod optim;
mod params;
mod tape;

pub use conv::ConvGeometry;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

/// Dynamic-rank array type used throughout the engine.
pub type Array = ndarray::ArrayD<f64>;
