//! Scalar abstraction over `f32`/`f64`.
//!
//! Tensor kernels are generic over [`Real`] so the same code serves the f32
//! execution path and the f64 shadow evaluation used by finite-difference
//! gradient checking. Transcendentals route through `libm` for portable,
//! bit-stable results.

use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub(crate) trait Real:
    Copy
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn rmax(self, other: Self) -> Self;
    fn rmin(self, other: Self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        libm::expf(self)
    }
    fn ln(self) -> Self {
        libm::logf(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrtf(self)
    }
    fn rmax(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn rmin(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    fn rmax(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn rmin(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
}

/// `x^p` for f32 via libm.
pub(crate) fn powf32(x: f32, p: f32) -> f32 {
    libm::powf(x, p)
}

/// `x^p` for f64 via libm.
pub(crate) fn powf64(x: f64, p: f64) -> f64 {
    libm::pow(x, p)
}

pub(crate) fn log10_64(x: f64) -> f64 {
    libm::log10(x)
}
