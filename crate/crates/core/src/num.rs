//! Scalar abstraction for the numeric core.
//!
//! Everything in this crate that does arithmetic is generic over [`Real`],
//! a floating-point scalar. `f32` and `f64` satisfy the blanket impl; the
//! crate root exports concrete aliases for both.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, Signed};

/// Floating-point scalar usable throughout the crate.
///
/// The bound set is the union of what the grid math, the FFT backend, and
/// the reductions need; it is blanket-implemented, so any conforming float
/// type works without an explicit impl.
pub trait Real:
    Float + FromPrimitive + Signed + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Shorthand for converting an `f64` constant into `Self`.
    ///
    /// Panics only if the target type cannot represent any `f64` at all,
    /// which no conforming float type triggers; overflow saturates to
    /// infinity per `num-traits`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("float constant must convert")
    }

    /// Lossy widening to `f64` for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + Signed
        + NumAssign
        + Sum
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}
