use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic needed by the flow and controller evaluators.
///
/// Implemented by `f64` (plain evaluation), [`Var`](super::Var) (reverse-mode
/// tape), and [`Jet`](super::Jet) over either of them (forward-mode input
/// derivatives). Nesting `Jet<Var>` gives mixed second derivatives.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// A constant carrying no derivative information.
    fn from_f64(v: f64) -> Self;
    /// Primal value.
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn ln(self) -> Self;

    fn scale(self, c: f64) -> Self {
        self * Self::from_f64(c)
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
}
