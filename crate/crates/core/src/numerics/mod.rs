//! Dense tensors, reverse-mode differentiation, Adam, and deterministic streams.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::AdamState;
pub use graph::{Gradients, Graph, NodeId, Segment};
pub use params::ParamStore;
pub use rng::Rng;
pub use tensor::{matmul, Real, Tensor};
