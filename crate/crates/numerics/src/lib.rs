//! Minimal tensor library with reverse-mode automatic differentiation.
//!
//! Values live on a [`Graph`] tape; trainable weights live in a
//! [`ParamStore`] and are copied onto the tape per forward pass. The layer
//! set is exactly what a conv/batch-norm/pool image embedder feeding a
//! two-layer GRU classifier needs, plus [`Adam`] and a finite-difference
//! [`grad_check`].

mod adam;
mod error;
mod gradcheck;
mod graph;
pub mod layers;
mod ops;
mod params;
mod real;
mod tensor;

pub use adam::Adam;
pub use error::{NumericsError, Result};
pub use gradcheck::grad_check;
pub use graph::{Graph, Mode, Var};
pub use ops::{softmax_rows, GruVars, RunningStats};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
