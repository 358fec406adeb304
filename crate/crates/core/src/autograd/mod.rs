//! Dense reverse-mode automatic differentiation in double precision.
//!
//! A [`Graph`] records every operation as it runs; [`Graph::backward`]
//! sweeps it once in reverse. Trainable tensors live in a [`ParamStore`]
//! and enter a graph through [`Graph::param`].

mod graph;
pub mod gradcheck;
mod optim;
mod params;
mod tensor;

pub use graph::{gelu, sigmoid, softsign, Graph, Reduce, Unary, Var};
pub use optim::{Method, Optimizer, OptimizerConfig};
pub use params::{named_rng, stable_hash, uniform_init, ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
