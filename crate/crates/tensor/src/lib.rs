//! Dense `f32` tensors with tape-based reverse-mode differentiation.
//!
//! The op set is the one a shifted-window 3-D transformer, a prompt-conditioned
//! mask decoder and a small convolutional critic need: affine maps, layer
//! norm, fused multi-head attention, 3-D convolution, linear resizing and
//! the usual shape shuffles.

mod graph;
pub mod nn;
mod ops;
mod tensor;

pub use graph::{BackCtx, Gradients, Graph, ParamId, ParamStore, Var};
pub use nn::{attention, conv3d, resize_axis, resize_trilinear, Conv3dSpec};
pub use ops::{gelu, sigmoid};
pub use tensor::{broadcast_shape, gemm, strides, Tensor};
