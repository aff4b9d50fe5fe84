//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] is a tape; [`Var`] handles are cheap copies pointing into it.
//! Model parameters live in a [`ParamStore`] and are bound into a graph
//! through a [`Session`], which also decides which of them receive
//! gradients.

pub mod gradcheck;
mod graph;
pub mod ops;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, Tensor, Var};
pub use ops::{concat, stack, ConvGeometry};
pub use optim::Adam;
pub use params::{init, Param, ParamId, ParamStore, Session, Trainable};

pub use ndarray;
