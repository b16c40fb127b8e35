//! Reverse-mode tape.
//!
//! Nodes are stored in creation order with at most two parents and the local
//! partial derivatives computed during the forward pass, so the backward pass
//! is one sweep in reverse creation order. Constants never touch the tape.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;
use core::ops::{Add, Div, Mul, Neg, Sub};

use super::real::Real;

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Affine,
    Exp,
    Ln,
    Tanh,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Affine => "affine",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Tanh => "tanh",
        }
    }
}

#[derive(Default)]
struct Nodes {
    vals: Vec<f64>,
    parents: Vec<[u32; 2]>,
    partials: Vec<[f64; 2]>,
    ops: Vec<Op>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Nodes>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(value, [NONE, NONE], [0.0, 0.0], Op::Leaf);
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    fn push(&self, val: f64, parents: [u32; 2], partials: [f64; 2], op: Op) -> u32 {
        let mut n = self.nodes.borrow_mut();
        let idx = n.vals.len() as u32;
        n.vals.push(val);
        n.parents.push(parents);
        n.partials.push(partials);
        n.ops.push(op);
        idx
    }

    /// Adjoints of every node with respect to `output`.
    pub(crate) fn adjoints(&self, output: Var<'_>) -> Vec<f64> {
        let n = self.nodes.borrow();
        let mut adj = vec![0.0; n.vals.len()];
        if output.tape.is_none() {
            return adj;
        }
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let [p0, p1] = n.parents[i];
            let [d0, d1] = n.partials[i];
            if p0 != NONE {
                adj[p0 as usize] += a * d0;
            }
            if p1 != NONE {
                adj[p1 as usize] += a * d1;
            }
        }
        adj
    }

    /// First node whose value is not finite.
    pub(crate) fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        let n = self.nodes.borrow();
        n.vals
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| (i, n.ops[i].name()))
    }
}

/// A scalar that is either a constant or a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var(#{} = {})", self.idx, self.val),
            None => write!(f, "Var(const {})", self.val),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var {
            tape: None,
            idx: NONE,
            val,
        }
    }

    pub fn index(&self) -> Option<usize> {
        self.tape.map(|_| self.idx as usize)
    }

    fn unary(self, val: f64, d: f64, op: Op) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => {
                let idx = t.push(val, [self.idx, NONE], [d, 0.0], op);
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
        }
    }

    fn binary(self, other: Self, val: f64, da: f64, db: f64, op: Op) -> Self {
        match (self.tape, other.tape) {
            (None, None) => Var::constant(val),
            (Some(t), None) => {
                let idx = t.push(val, [self.idx, NONE], [da, 0.0], op);
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
            (None, Some(t)) => {
                let idx = t.push(val, [other.idx, NONE], [db, 0.0], op);
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
            (Some(t), Some(_)) => {
                let idx = t.push(val, [self.idx, other.idx], [da, db], op);
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.binary(o, self.val + o.val, 1.0, 1.0, Op::Add)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, 1.0, -1.0, Op::Sub)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val, Op::Mul)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.val / o.val;
        self.binary(o, q, 1.0 / o.val, -q / o.val, Op::Div)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0, Op::Neg)
    }
}

impl Add<f64> for Var<'_> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        self.unary(self.val + c, 1.0, Op::Affine)
    }
}

impl Sub<f64> for Var<'_> {
    type Output = Self;
    fn sub(self, c: f64) -> Self {
        self.unary(self.val - c, 1.0, Op::Affine)
    }
}

impl Mul<f64> for Var<'_> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        self.unary(self.val * c, c, Op::Affine)
    }
}

impl Div<f64> for Var<'_> {
    type Output = Self;
    fn div(self, c: f64) -> Self {
        self.unary(self.val / c, 1.0 / c, Op::Affine)
    }
}

impl Real for Var<'_> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }

    fn value(self) -> f64 {
        self.val
    }

    fn exp(self) -> Self {
        let e = libm::exp(self.val);
        self.unary(e, e, Op::Exp)
    }

    fn ln(self) -> Self {
        self.unary(libm::log(self.val), 1.0 / self.val, Op::Ln)
    }

    fn tanh(self) -> Self {
        let t = libm::tanh(self.val);
        self.unary(t, 1.0 - t * t, Op::Tanh)
    }

    fn square(self) -> Self {
        self.unary(self.val * self.val, 2.0 * self.val, Op::Mul)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(-2.0);
        let z = x * y + x.exp() / y;
        let adj = tape.adjoints(z);
        let e3 = libm::exp(3.0);
        assert!((adj[0] - (-2.0 + e3 / -2.0)).abs() < 1e-12);
        assert!((adj[1] - (3.0 - e3 / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let c = Var::constant(2.0) * Var::constant(4.0);
        assert_eq!(c.index(), None);
        let _ = x * c;
        assert_eq!(tape.len(), 2);
    }

    #[test]
    fn reports_first_non_finite_node() {
        let tape = Tape::new();
        let x = tape.var(-1.0);
        let _ = (x * 2.0).ln();
        assert_eq!(tape.first_non_finite(), Some((2, "ln")));
    }
}
