//! First-order jets: a value plus its derivatives along up to [`MAX_DIM`]
//! input directions. `Jet<f64>` gives Jacobians; `Jet<Var>` records the jet
//! arithmetic on a tape so parameter gradients of Jacobian entries come out of
//! one reverse sweep.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;

/// Largest state dimension the jet can carry.
pub const MAX_DIM: usize = 6;

#[derive(Clone, Copy, Debug)]
pub struct Jet<S: Scalar> {
    pub v: S,
    pub d: [S; MAX_DIM],
    pub n: usize,
}

impl<S: Scalar> Jet<S> {
    pub fn constant(v: S) -> Self {
        Jet {
            v,
            d: [S::from_f64(0.0); MAX_DIM],
            n: 0,
        }
    }

    /// The `i`-th of `n` independent inputs with value `v`.
    pub fn seed(v: S, i: usize, n: usize) -> Self {
        assert!(n <= MAX_DIM && i < n);
        let mut d = [S::from_f64(0.0); MAX_DIM];
        d[i] = S::from_f64(1.0);
        Jet { v, d, n }
    }

    /// Derivative along direction `i`.
    pub fn deriv(&self, i: usize) -> S {
        if i < self.n {
            self.d[i]
        } else {
            S::from_f64(0.0)
        }
    }

    #[inline]
    fn chain(self, v: S, dv: S) -> Self {
        let mut d = self.d;
        for di in d.iter_mut().take(self.n) {
            *di = *di * dv;
        }
        Jet { v, d, n: self.n }
    }
}

impl<S: Scalar> Add for Jet<S> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let n = self.n.max(rhs.n);
        let mut d = self.d;
        for i in 0..rhs.n {
            d[i] = d[i] + rhs.d[i];
        }
        Jet {
            v: self.v + rhs.v,
            d,
            n,
        }
    }
}

impl<S: Scalar> Sub for Jet<S> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let n = self.n.max(rhs.n);
        let mut d = self.d;
        for i in 0..rhs.n {
            d[i] = d[i] - rhs.d[i];
        }
        Jet {
            v: self.v - rhs.v,
            d,
            n,
        }
    }
}

impl<S: Scalar> Mul for Jet<S> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let n = self.n.max(rhs.n);
        let mut d = [S::from_f64(0.0); MAX_DIM];
        for (i, di) in d.iter_mut().enumerate().take(n) {
            let mut acc = S::from_f64(0.0);
            if i < rhs.n {
                acc = self.v * rhs.d[i];
            }
            if i < self.n {
                acc = acc + self.d[i] * rhs.v;
            }
            *di = acc;
        }
        Jet {
            v: self.v * rhs.v,
            d,
            n,
        }
    }
}

impl<S: Scalar> Div for Jet<S> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let n = self.n.max(rhs.n);
        let q = self.v / rhs.v;
        let mut d = [S::from_f64(0.0); MAX_DIM];
        for (i, di) in d.iter_mut().enumerate().take(n) {
            let num = self.deriv(i) - q * rhs.deriv(i);
            *di = num / rhs.v;
        }
        Jet { v: q, d, n }
    }
}

impl<S: Scalar> Neg for Jet<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut d = self.d;
        for di in d.iter_mut().take(self.n) {
            *di = -*di;
        }
        Jet {
            v: -self.v,
            d,
            n: self.n,
        }
    }
}

impl<S: Scalar> Scalar for Jet<S> {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Jet::constant(S::from_f64(v))
    }
    #[inline]
    fn value(&self) -> f64 {
        self.v.value()
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        let dt = S::from_f64(1.0) - t * t;
        self.chain(t, dt)
    }
    #[inline]
    fn ln(self) -> Self {
        let l = self.v.ln();
        let inv = S::from_f64(1.0) / self.v;
        self.chain(l, inv)
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        let mut d = self.d;
        for di in d.iter_mut().take(self.n) {
            *di = di.scale(c);
        }
        Jet {
            v: self.v.scale(c),
            d,
            n: self.n,
        }
    }
}
