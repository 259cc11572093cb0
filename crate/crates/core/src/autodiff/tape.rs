//! Scalar reverse-mode tape.
//!
//! Every non-constant operation appends one node holding at most two parent
//! indices and the local partial derivatives. Constants never touch the tape,
//! so products with structurally-zero tangents cost nothing.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;

const NO_PARENT: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Wengert list for one gradient evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes; previously issued variables become invalid.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Registers an independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [NO_PARENT; 2],
            partials: [0.0; 2],
        });
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NO_PARENT as usize, "tape overflow");
        nodes.push(node);
        idx as u32
    }

    /// Adjoints of every recorded node with respect to `output`.
    ///
    /// `adjoints` is resized and overwritten, so one buffer can serve several
    /// sweeps over the same tape.
    pub fn backward_into(&self, output: Var<'_>, adjoints: &mut Vec<f64>) {
        let nodes = self.nodes.borrow();
        adjoints.clear();
        adjoints.resize(nodes.len(), 0.0);
        if output.idx == NO_PARENT {
            return;
        }
        adjoints[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adjoints[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NO_PARENT {
                    adjoints[p as usize] += a * node.partials[k];
                }
            }
        }
    }

    /// Gradient of `output` with respect to `inputs`.
    pub fn gradient(&self, output: Var<'_>, inputs: &[Var<'_>]) -> Vec<f64> {
        let mut adj = Vec::new();
        self.backward_into(output, &mut adj);
        inputs
            .iter()
            .map(|v| {
                if v.idx == NO_PARENT {
                    0.0
                } else {
                    adj[v.idx as usize]
                }
            })
            .collect()
    }
}

/// A value on a [`Tape`], or a tape-free constant.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.idx == NO_PARENT {
            write!(f, "Var(const {})", self.val)
        } else {
            write!(f, "Var(#{} = {})", self.idx, self.val)
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var {
            tape: None,
            idx: NO_PARENT,
            val,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == NO_PARENT
    }

    /// Tape index, or `None` for constants.
    pub fn index(&self) -> Option<usize> {
        (self.idx != NO_PARENT).then_some(self.idx as usize)
    }

    #[inline]
    fn unary(self, val: f64, partial: f64) -> Self {
        match self.tape {
            Some(tape) if self.idx != NO_PARENT => Var {
                tape: Some(tape),
                idx: tape.push(Node {
                    parents: [self.idx, NO_PARENT],
                    partials: [partial, 0.0],
                }),
                val,
            },
            _ => Var::constant(val),
        }
    }

    #[inline]
    fn binary(self, other: Self, val: f64, da: f64, db: f64) -> Self {
        let a_live = self.idx != NO_PARENT;
        let b_live = other.idx != NO_PARENT;
        match (a_live, b_live) {
            (false, false) => Var::constant(val),
            (true, false) => self.unary(val, da),
            (false, true) => other.unary(val, db),
            (true, true) => {
                let tape = self.tape.or(other.tape).expect("live var without tape");
                Var {
                    tape: Some(tape),
                    idx: tape.push(Node {
                        parents: [self.idx, other.idx],
                        partials: [da, db],
                    }),
                    val,
                }
            }
        }
    }

    #[inline]
    fn is_const_zero(&self) -> bool {
        self.idx == NO_PARENT && self.val == 0.0
    }
}

impl Add for Var<'_> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        if rhs.is_const_zero() {
            return self;
        }
        if self.is_const_zero() {
            return rhs;
        }
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        if rhs.is_const_zero() {
            return self;
        }
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        if self.is_const_zero() || rhs.is_const_zero() {
            return Var::constant(0.0);
        }
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        if self.is_const_zero() {
            return Var::constant(q);
        }
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl Scalar for Var<'_> {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.val
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    #[inline]
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        if c == 0.0 {
            return Var::constant(0.0);
        }
        self.unary(self.val * c, c)
    }
}
