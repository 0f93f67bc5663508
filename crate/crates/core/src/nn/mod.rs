//! Minimal reverse-mode autodiff with the layers and optimizer the CURE
//! networks need.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, Param, ParamSet};
pub use tensor::Tensor;
