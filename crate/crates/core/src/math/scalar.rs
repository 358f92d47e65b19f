use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Abstraction over the number type numeric expressions are written in.
///
/// Implemented by `f64` (plain evaluation) and by [`crate::math::Var`]
/// (tape-recorded evaluation). Model code written once against this trait
/// serves both the fast simulation path and the gradient path, which keeps
/// the two from drifting apart.
///
/// Operators consume their operands; implementations are expected to make
/// `clone` cheap (for `Var` it is a reference-count bump).
pub trait Scalar:
    Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + 'static
{
    fn from_f64(v: f64) -> Self;

    /// Current numeric value (ignores any recorded history).
    fn value(&self) -> f64;

    /// Multiply by a plain constant.
    fn scale(&self, c: f64) -> Self;

    /// Add a plain constant.
    fn shift(&self, c: f64) -> Self;

    fn recip(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn tan(&self) -> Self;
    fn asin(&self) -> Self;
    /// Four-quadrant arctangent; `self` is the y argument.
    fn atan2(&self, x: &Self) -> Self;
    fn sqrt(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn tanh(&self) -> Self;
    fn powi(&self, n: i32) -> Self;
    fn abs(&self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn is_finite(&self) -> bool {
        self.value().is_finite()
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn value(&self) -> f64 {
        *self
    }

    fn scale(&self, c: f64) -> Self {
        self * c
    }

    fn shift(&self, c: f64) -> Self {
        self + c
    }

    fn recip(&self) -> Self {
        1.0 / self
    }

    fn sin(&self) -> Self {
        f64::sin(*self)
    }

    fn cos(&self) -> Self {
        f64::cos(*self)
    }

    fn tan(&self) -> Self {
        f64::tan(*self)
    }

    fn asin(&self) -> Self {
        f64::asin(*self)
    }

    fn atan2(&self, x: &Self) -> Self {
        f64::atan2(*self, *x)
    }

    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }

    fn exp(&self) -> Self {
        f64::exp(*self)
    }

    fn ln(&self) -> Self {
        f64::ln(*self)
    }

    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }

    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }

    fn abs(&self) -> Self {
        f64::abs(*self)
    }
}
