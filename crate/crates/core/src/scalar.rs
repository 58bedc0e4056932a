//! Floating-point element trait shared by every numeric routine in the crate.
//!
//! All tensor math is generic over [`Scalar`] so the same kernels run in
//! `f32` (fast training storage) and `f64` (the precision the verification
//! suites assume). Integer export is deliberately *not* generic: grid
//! tolerances are defined in `f64` and only make sense there.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type for tensors and network parameters.
///
/// `Float::round` is required to round half away from zero (true for the
/// primitive floats); the quantizer relies on that tie rule matching the
/// integer inference path exactly.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Shorthand conversion from an `f64` literal; panics only for values a
    /// float cannot represent at all (never for finite inputs).
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Lossy view as `f64`, used for reporting and cross-type checks.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
