//! A small NCHW tensor type with tape-free reverse-mode differentiation.
//!
//! Every op on [`Var`] records its parents and a backward closure; calling
//! [`Var::backward`] on a scalar walks the graph in reverse topological order.
//! Graphs built from constants only carry no history, so inference releases
//! intermediates eagerly.

mod float;
mod ops;
mod optim;
mod params;
mod tensor;
mod var;

pub use float::{gemm, Float, Layout};
pub use ops::BatchStats;
pub use optim::{Adam, AdamMoments};
pub use params::{Binding, Mode, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
pub use var::{BackwardFn, Gradients, Var};
