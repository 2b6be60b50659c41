//! Self-supervised monocular depth estimation with linear-attention networks.
//!
//! The crate is generic over the element type ([`Scalar`]); the aliases below
//! fix it to `f32` (training) or `f64` (oracles and reproducible runs).

pub mod alloc;
pub mod autodiff;
pub mod dlnet;
pub mod error;
pub mod geometry;
pub mod linattn;
pub mod losses;
pub mod nn;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use alloc::tune_allocator;
pub use autodiff::{Activation, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
