//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Tape`] stores one node per recorded operation: the indices of up to
//! two parent nodes and the local partial derivative with respect to each.
//! A [`Var`] pairs a numeric value with an optional reference to its tape
//! node; a `Var` without a node is a constant and receives a zero adjoint.
//!
//! [`Tape::backward`] seeds a single output with adjoint 1 and sweeps the
//! node list once in reverse. Because nodes are appended in evaluation
//! order, every node's parents precede it, so the reverse sweep is already
//! a valid topological order and the result is bit-reproducible for a
//! given recording.
//!
//! The tape is single-threaded by construction (`Rc<RefCell<..>>`); a
//! `Var` belongs to exactly one tape and mixing tapes in one expression
//! panics rather than silently producing a wrong gradient.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::Scalar;

#[derive(Clone, Copy)]
struct Node {
    parent: [u32; 2],
    partial: [f64; 2],
    arity: u8,
}

/// Append-only record of operations for one gradient computation.
///
/// Cloning a `Tape` clones the handle, not the storage; all clones append
/// to the same node list. Recording is cheap and the tape is meant to be
/// dropped wholesale once the gradients have been read out.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Create a tracked input variable (a leaf node).
    pub fn var(&self, value: f64) -> Var {
        let id = self.push(Node {
            parent: [0, 0],
            partial: [0.0, 0.0],
            arity: 0,
        });
        Var {
            value,
            node: Some(VarNode {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Create a batch of tracked inputs.
    pub fn vars(&self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        assert!(id < u32::MAX as usize, "tape overflow");
        nodes.push(node);
        id
    }

    /// Record an operation with the given result value and parent partials.
    ///
    /// All parents must be tracked variables on this tape; recording a node
    /// against a constant or a variable from another tape is a logic error
    /// and panics. At most two parents are supported; wider operations are
    /// built by folding.
    pub fn record(&self, value: f64, parents: &[(&Var, f64)]) -> Var {
        assert!(parents.len() <= 2, "tape nodes take at most two parents");
        let mut node = Node {
            parent: [0, 0],
            partial: [0.0, 0.0],
            arity: parents.len() as u8,
        };
        for (slot, (var, partial)) in parents.iter().enumerate() {
            let vn = var
                .node
                .as_ref()
                .expect("cannot record a tape node against a constant");
            assert!(
                self.same_tape(&vn.tape),
                "cannot record against a variable from another tape"
            );
            node.parent[slot] = vn.id as u32;
            node.partial[slot] = *partial;
        }
        let id = self.push(node);
        Var {
            value,
            node: Some(VarNode {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Reverse sweep from `seed` (adjoint 1). Returns one adjoint per node.
    ///
    /// Constants never have nodes, so querying them through
    /// [`Gradients::wrt`] yields zero. Panics if `seed` is a constant or
    /// lives on a different tape.
    pub fn backward(&self, seed: &Var) -> Gradients {
        let seed_node = seed
            .node
            .as_ref()
            .expect("backward seed must be a tracked variable");
        assert!(
            self.same_tape(&seed_node.tape),
            "backward seed belongs to another tape"
        );
        let nodes = self.nodes.borrow();
        let mut adjoint = vec![0.0; nodes.len()];
        adjoint[seed_node.id] = 1.0;
        for id in (0..nodes.len()).rev() {
            let a = adjoint[id];
            if a == 0.0 {
                continue;
            }
            let node = &nodes[id];
            for slot in 0..node.arity as usize {
                adjoint[node.parent[slot] as usize] += a * node.partial[slot];
            }
        }
        Gradients {
            tape: self.clone(),
            adjoint,
        }
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Adjoints produced by one [`Tape::backward`] sweep.
pub struct Gradients {
    tape: Tape,
    adjoint: Vec<f64>,
}

impl Gradients {
    /// Adjoint of `var`. Constants yield zero; variables from another tape
    /// panic.
    pub fn wrt(&self, var: &Var) -> f64 {
        match &var.node {
            None => 0.0,
            Some(vn) => {
                assert!(
                    self.tape.same_tape(&vn.tape),
                    "gradient query for a variable from another tape"
                );
                self.adjoint[vn.id]
            }
        }
    }
}

#[derive(Clone)]
struct VarNode {
    tape: Tape,
    id: usize,
}

/// A scalar that optionally remembers how it was computed.
///
/// Arithmetic between two tracked variables records a node; arithmetic
/// involving constants folds the constant into the local partial. The two
/// exact identities `x + 0` and `x * 0` (constant zero operand) skip
/// recording entirely, which keeps sparse matrix work on the tape from
/// ballooning; both are gradient-exact because the constant carries no
/// adjoint.
#[derive(Clone)]
pub struct Var {
    value: f64,
    node: Option<VarNode>,
}

impl Var {
    /// An untracked constant.
    pub fn constant(value: f64) -> Self {
        Var { value, node: None }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    fn unary(&self, value: f64, partial: f64) -> Var {
        match self.tape() {
            None => Var::constant(value),
            Some(tape) => tape.record(value, &[(self, partial)]),
        }
    }

    fn binary(&self, rhs: &Var, value: f64, da: f64, db: f64) -> Var {
        match (self.tape(), rhs.tape()) {
            (None, None) => Var::constant(value),
            (Some(t), None) => t.record(value, &[(self, da)]),
            (None, Some(t)) => t.record(value, &[(rhs, db)]),
            (Some(ta), Some(tb)) => {
                assert!(
                    ta.same_tape(tb),
                    "cannot mix variables from different tapes in one expression"
                );
                ta.record(value, &[(self, da), (rhs, db)])
            }
        }
    }

    fn is_const_zero(&self) -> bool {
        self.node.is_none() && self.value == 0.0
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            None => write!(f, "Var(const {})", self.value),
            Some(vn) => write!(f, "Var(#{} {})", vn.id, self.value),
        }
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, rhs: Var) -> Var {
        if rhs.is_const_zero() {
            return self;
        }
        if self.is_const_zero() {
            return rhs;
        }
        self.binary(&rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, rhs: Var) -> Var {
        if rhs.is_const_zero() {
            return self;
        }
        self.binary(&rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, rhs: Var) -> Var {
        if self.is_const_zero() || rhs.is_const_zero() {
            return Var::constant(0.0);
        }
        self.binary(&rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, rhs: Var) -> Var {
        let inv = 1.0 / rhs.value;
        self.binary(
            &rhs,
            self.value * inv,
            inv,
            -self.value * inv * inv,
        )
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(-self.value, -1.0)
    }
}

impl Scalar for Var {
    fn from_f64(v: f64) -> Self {
        Var::constant(v)
    }

    fn value(&self) -> f64 {
        self.value
    }

    fn scale(&self, c: f64) -> Self {
        if c == 0.0 {
            return Var::constant(0.0);
        }
        if c == 1.0 {
            return self.clone();
        }
        self.unary(self.value * c, c)
    }

    fn shift(&self, c: f64) -> Self {
        if c == 0.0 {
            return self.clone();
        }
        self.unary(self.value + c, 1.0)
    }

    fn recip(&self) -> Self {
        let inv = 1.0 / self.value;
        self.unary(inv, -inv * inv)
    }

    fn sin(&self) -> Self {
        self.unary(self.value.sin(), self.value.cos())
    }

    fn cos(&self) -> Self {
        self.unary(self.value.cos(), -self.value.sin())
    }

    fn tan(&self) -> Self {
        let t = self.value.tan();
        self.unary(t, 1.0 + t * t)
    }

    fn asin(&self) -> Self {
        let v = self.value;
        self.unary(v.asin(), 1.0 / (1.0 - v * v).sqrt())
    }

    fn atan2(&self, x: &Self) -> Self {
        let (y, xv) = (self.value, x.value);
        let q = y * y + xv * xv;
        self.binary(x, y.atan2(xv), xv / q, -y / q)
    }

    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        self.unary(s, 0.5 / s)
    }

    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }

    fn ln(&self) -> Self {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    fn tanh(&self) -> Self {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn powi(&self, n: i32) -> Self {
        let v = self.value;
        self.unary(v.powi(n), f64::from(n) * v.powi(n - 1))
    }

    fn abs(&self) -> Self {
        self.unary(self.value.abs(), self.value.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_do_not_touch_the_tape() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let before = tape.len();
        let c = Var::constant(3.0);
        let _ = c.clone() * Var::constant(4.0);
        assert_eq!(tape.len(), before);
        let y = x * c;
        assert_eq!(y.value(), 6.0);
        assert_eq!(tape.len(), before + 1);
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(4.0);
        let z = x.clone() * y.clone();
        let g = tape.backward(&z);
        assert_eq!(g.wrt(&x), 4.0);
        assert_eq!(g.wrt(&y), 3.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // z = x * x + x  =>  dz/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.var(5.0);
        let z = x.clone() * x.clone() + x.clone();
        let g = tape.backward(&z);
        assert_eq!(g.wrt(&x), 11.0);
    }

    #[test]
    fn constant_gets_zero_adjoint() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let c = Var::constant(7.0);
        let z = x.clone() * c.clone();
        let g = tape.backward(&z);
        assert_eq!(g.wrt(&c), 0.0);
        assert_eq!(g.wrt(&x), 7.0);
    }

    #[test]
    fn zero_identities_fold_without_changing_gradients() {
        let tape = Tape::new();
        let x = tape.var(2.5);
        let y = x.clone() + Var::constant(0.0);
        let z = x.clone() * Var::constant(0.0);
        assert!(y.is_tracked());
        assert!(!z.is_tracked());
        let w = y * tape.var(3.0);
        let g = tape.backward(&w);
        assert_eq!(g.wrt(&x), 3.0);
    }

    #[test]
    fn chain_through_transcendentals() {
        // z = sin(x) * exp(x); dz/dx = cos(x) e^x + sin(x) e^x
        let tape = Tape::new();
        let x = tape.var(0.7);
        let z = x.sin() * x.exp();
        let g = tape.backward(&z);
        let expect = 0.7f64.cos() * 0.7f64.exp() + 0.7f64.sin() * 0.7f64.exp();
        assert!((g.wrt(&x) - expect).abs() < 1e-14);
    }

    #[test]
    fn atan2_partials() {
        let tape = Tape::new();
        let y = tape.var(0.3);
        let x = tape.var(-1.2);
        let z = y.atan2(&x);
        let g = tape.backward(&z);
        let q = 0.3f64 * 0.3 + 1.2 * 1.2;
        assert!((g.wrt(&y) - (-1.2 / q)).abs() < 1e-15);
        assert!((g.wrt(&x) - (-0.3 / q)).abs() < 1e-15);
    }

    #[test]
    fn backward_is_deterministic_bitwise() {
        let run = || {
            let tape = Tape::new();
            let xs = tape.vars(&[0.3, 1.7, -0.4]);
            let mut acc = Var::constant(0.0);
            for (i, x) in xs.iter().enumerate() {
                let term = x.sin() * x.clone().scale(1.0 + i as f64) + x.exp();
                acc = acc + term * x.clone();
            }
            let g = tape.backward(&acc);
            xs.iter().map(|x| g.wrt(x)).collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    #[should_panic(expected = "different tapes")]
    fn mixing_tapes_panics() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.var(1.0);
        let b = t2.var(2.0);
        let _ = a * b;
    }

    #[test]
    #[should_panic(expected = "seed must be a tracked")]
    fn backward_from_constant_panics() {
        let tape = Tape::new();
        let _x = tape.var(1.0);
        tape.backward(&Var::constant(3.0));
    }
}
