//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the engine computes in.
///
/// Implemented for `f32` and `f64`. Experiments default to `f64`; the
/// perturbation magnitudes under study sit well below single-precision noise.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Short type name used in diagnostics.
    const NAME: &'static str;

    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Euclidean norm of a slice.
pub fn l2_norm<T: Scalar>(values: &[T]) -> T {
    values.iter().map(|&v| v * v).sum::<T>().sqrt()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
