//! A compact reverse-mode automatic differentiation engine.
//!
//! Values are dense `f64` arrays. Operations are recorded on a [`Tape`] and a
//! single reverse sweep produces gradients for every leaf created with
//! [`Tape::var`]. Convolutions run through im2col and `matrixmultiply`, which
//! is single-threaded and therefore bit-reproducible run to run.

mod array;
pub mod check;
mod conv;
pub mod gemm;
pub mod nn;
mod ops;
pub mod optim;
mod tape;

pub use array::Array;
pub use nn::{Binding, Conv2d, Norm, ParamStore};
pub use ops::{normal_cdf, normal_pdf, sigmoid, softplus};
pub use optim::Adam;
pub use tape::{Gradients, Tape, Var};
