//! Scalar abstraction for the numeric core.
//!
//! Everything in this crate is generic over a [`Real`] scalar so the same
//! pipeline runs in `f32` or `f64`. Concrete aliases for the common `f64`
//! instantiation live at the crate root.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar used throughout the simulator.
///
/// Extends `num_traits::Float` with the conversions and sampling hooks the
/// pipeline needs. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Conversion from an `f64` literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal convertible to scalar")
    }

    /// Widening conversion used for reporting and serialization.
    fn to_f64(self) -> f64;

    /// One standard normal draw.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One uniform draw from `[0, 1)`.
    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
}

/// Complex number over the crate scalar.
pub type C<T> = Complex<T>;

/// Draw one circularly symmetric complex Gaussian `CN(0, 1)`: real and
/// imaginary parts are independent `N(0, 1/2)`.
pub fn standard_complex_normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> C<T> {
    let half_sqrt = T::of(0.5).sqrt();
    let re = T::standard_normal(rng) * half_sqrt;
    let im = T::standard_normal(rng) * half_sqrt;
    Complex::new(re, im)
}

/// Uniform draw from `[lo, hi)`.
pub fn uniform_in<T: Real, R: Rng + ?Sized>(rng: &mut R, lo: T, hi: T) -> T {
    lo + (hi - lo) * T::uniform_01(rng)
}
