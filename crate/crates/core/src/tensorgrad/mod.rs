//! Tensors, a reverse-mode autodiff tape, AdamW, and checkpoint io.
//!
//! The op set is closed and matches what the network needs: convolution
//! (strided/dilated), pooling, pointwise channel mixing, dense layers, a GRU
//! cell, elementwise activations, concatenation, and L1 losses. Everything is
//! generic over [`crate::scalar::Scalar`] so gradient checks run at f64 while
//! training runs at f32.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use kernels::{conv2d_out_dims, conv_out_dim, ConvGeom};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use tape::{Grads, GruVars, ParamId, Params, Tape, Var};
pub use tensor::{ShapeError, Tensor};
