//! Scalar abstraction for the numeric core.
//!
//! Everything that runs through the autodiff tape (tensors, the network, the
//! trainer) is generic over [`Scalar`] so the same code path can be exercised
//! at f64 for gradient checking and at f32 for training throughput.

/// Floating point scalar: f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumCast
    + core::ops::AddAssign
    + core::ops::SubAssign
    + core::ops::MulAssign
    + core::fmt::Debug
    + core::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64 (widening is exact, narrowing rounds).
    fn cast_from(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts to any float scalar")
    }

    /// Lossy conversion to f64 (exact for both f32 and f64).
    fn cast_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("float scalar converts to f64")
    }

    /// Lossy conversion to f32 (used by the narrow on-disk formats).
    fn cast_f32(self) -> f32 {
        <f32 as num_traits::NumCast>::from(self).expect("float scalar converts to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
