//! Minimal reverse-mode differentiation engine.
//!
//! Exactly the layer set the wiretap architectures need: dense, 1-D
//! convolution, relu/tanh/sigmoid, the straight-through sign, reshape and
//! flatten, batched reductions for the Donsker-Varadhan objective, and Adam.
//!
//! Everything is 64-bit so finite-difference gradient checks stay tight.

mod adam;
mod graph;
mod tensor;

pub use adam::{AdamState, Direction};
pub use graph::{gemm_slices, Arena, ConvSpec, Graph, NodeId, Op, PaddingMode, ParamSet, ParamTensor, SetId};
pub use tensor::Tensor;
