//! Scalar abstraction shared by the planning math.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar used for probabilities, path scores and latencies.
///
/// Implemented for `f32` and `f64`. Invariant checks scale their tolerance to
/// the precision of the type through [`Real::tolerance`].
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Absolute tolerance for distribution-level invariants (row sums, surrogate bookkeeping).
    fn tolerance() -> Self;

    /// Lossy conversion used by literals and RNG draws.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count fits scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f32 {
    fn tolerance() -> Self {
        1e-4
    }
}

impl Real for f64 {
    fn tolerance() -> Self {
        1e-9
    }
}
