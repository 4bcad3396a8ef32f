//! Dense arrays on a dynamic tape with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Node creation order doubles as the
//! topological order, so [`Graph::backward`] is a single reverse sweep.

mod array;
pub mod check;
mod gemm;
mod graph;
mod ops;
mod optim;

pub use array::Array;
pub use graph::{CustomBackward, Graph, Var};
pub use optim::{Adam, AdamConfig, Bindings, ParamId, ParamStore};
