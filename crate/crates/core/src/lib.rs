//! Core library for a LiDAR-guided vehicle stack: geodetic/local-frame
//! navigation helpers, segmented point-cloud projection, a small autodiff
//! tensor library, the waypoint/control network, the control-fusion policy,
//! and the behavior-cloning trainer.

pub mod controller;
pub mod geonav;
pub mod model;
pub mod projection;
pub mod scalar;
pub mod tensorgrad;
pub mod trainer;

pub use scalar::Scalar;

/// Concrete tensor aliases for the two supported scalar widths.
pub type Tensor32 = tensorgrad::Tensor<f32>;
pub type Tensor64 = tensorgrad::Tensor<f64>;
