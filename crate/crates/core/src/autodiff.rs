//! Scalar reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every primitive appends one node per scalar output holding its value and
//! the local partial derivative with respect to each input. Nodes are created
//! in topological order, so the backward pass is a single sweep from the loss
//! towards index zero.
//!
//! ```
//! use relaytopo::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.var(3.0);
//! let y = x * x + x.detach() * x;
//! let grads = tape.backward(y);
//! assert_eq!(grads.wrt(x), 2.0 * 3.0 + 3.0);
//! ```

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Smallest denominator magnitude accepted by [`Var::div`].
pub const MIN_DENOMINATOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Detach,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Affine,
    Exp,
    Log2,
    Relu,
    Min2,
    Sum,
    MatVec,
    Softmax,
}

/// One recorded value. Its inputs and local partials live in the tape's
/// edge arena at `edges.start..edges.end`.
#[derive(Clone, Debug)]
pub struct TapeNode {
    pub value: f64,
    pub op: Op,
    edges: std::ops::Range<usize>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<TapeNode>,
    /// `(parent index, d self / d parent)`.
    edges: Vec<(usize, f64)>,
}

#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a scalar on a particular [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.index, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::with_capacity(nodes),
                edges: Vec::with_capacity(edges),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, index: usize) -> TapeNode {
        self.inner.borrow().nodes[index].clone()
    }

    /// New independent input.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, Op::Leaf, std::iter::empty())
    }

    /// Constants are leaves nobody asks the gradient of.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.var(value)
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, value: f64, op: Op, edges: impl IntoIterator<Item = (usize, f64)>) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let start = inner.edges.len();
        inner.edges.extend(edges);
        let end = inner.edges.len();
        let index = inner.nodes.len();
        inner.nodes.push(TapeNode {
            value,
            op,
            edges: start..end,
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn check<'t>(&'t self, v: &Var<'t>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variable belongs to a different tape"
        );
    }

    /// Sum of any number of variables; zero for an empty slice.
    pub fn sum<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        xs.iter().for_each(|x| self.check(x));
        let value = xs.iter().map(|x| x.value).sum();
        self.push(value, Op::Sum, xs.iter().map(|x| (x.index, 1.0)))
    }

    /// `W x + b` with `W` row-major `b.len() x x.len()`.
    pub fn matvec<'t>(&'t self, w: &[Var<'t>], x: &[Var<'t>], b: &[Var<'t>]) -> Vec<Var<'t>> {
        let cols = x.len();
        assert_eq!(w.len(), b.len() * cols, "weight shape mismatch");
        b.iter()
            .enumerate()
            .map(|(r, bias)| {
                let row = &w[r * cols..(r + 1) * cols];
                let value = row.iter().zip(x).map(|(wi, xi)| wi.value * xi.value).sum::<f64>()
                    + bias.value;
                let edges = row
                    .iter()
                    .zip(x)
                    .flat_map(|(wi, xi)| [(wi.index, xi.value), (xi.index, wi.value)])
                    .chain(std::iter::once((bias.index, 1.0)));
                self.push(value, Op::MatVec, edges)
            })
            .collect()
    }

    /// Softmax over one row; the full Jacobian `y_i (delta_ij - y_j)` is
    /// recorded for every output.
    pub fn softmax<'t>(&'t self, xs: &[Var<'t>]) -> Vec<Var<'t>> {
        xs.iter().for_each(|x| self.check(x));
        let max = xs.iter().map(|x| x.value).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|x| (x.value - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let ys: Vec<f64> = exps.iter().map(|e| e / total).collect();
        (0..xs.len())
            .map(|i| {
                let edges = xs.iter().enumerate().map(|(j, x)| {
                    let kron = if i == j { 1.0 } else { 0.0 };
                    (x.index, ys[i] * (kron - ys[j]))
                });
                self.push(ys[i], Op::Softmax, edges.collect::<Vec<_>>())
            })
            .collect()
    }

    /// Reverse sweep from `loss`. Each node at or below `loss` is visited once.
    pub fn backward<'t>(&'t self, loss: Var<'t>) -> Gradients {
        self.check(&loss);
        let inner = self.inner.borrow();
        let mut adjoint = vec![0.0; inner.nodes.len()];
        adjoint[loss.index] = 1.0;
        let mut visited = 0;
        for i in (0..=loss.index).rev() {
            visited += 1;
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            for &(parent, partial) in &inner.edges[inner.nodes[i].edges.clone()] {
                adjoint[parent] += a * partial;
            }
        }
        Gradients { adjoint, visited }
    }
}

/// Adjoints of every node recorded before the loss.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoint: Vec<f64>,
    visited: usize,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adjoint.get(v.index).copied().unwrap_or(0.0)
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }

    /// Nodes swept by the backward pass.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn index(self) -> usize {
        self.index
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: f64, op: Op, partial: f64) -> Self {
        self.tape.push(value, op, [(self.index, partial)])
    }

    fn binary(self, other: Self, value: f64, op: Op, da: f64, db: f64) -> Self {
        self.tape.check(&other);
        self.tape
            .push(value, op, [(self.index, da), (other.index, db)])
    }

    /// Same value, no gradient flows back through the result.
    pub fn detach(self) -> Self {
        if self.tape.node(self.index).op == Op::Detach {
            return self;
        }
        self.tape.push(self.value, Op::Detach, std::iter::empty())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn div(self, other: Self) -> Result<Self> {
        if other.value.abs() < MIN_DENOMINATOR {
            return Err(Error::Domain {
                op: "div",
                value: other.value,
            });
        }
        let q = self.value / other.value;
        Ok(self.binary(other, q, Op::Div, 1.0 / other.value, -q / other.value))
    }

    /// `a * self + b` for constants `a`, `b`.
    pub fn affine(self, a: f64, b: f64) -> Self {
        self.unary(a * self.value + b, Op::Affine, a)
    }

    pub fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, Op::Exp, e)
    }

    pub fn log2(self) -> Result<Self> {
        if !(self.value > 0.0) {
            return Err(Error::Domain {
                op: "log2",
                value: self.value,
            });
        }
        Ok(self.unary(
            self.value.log2(),
            Op::Log2,
            1.0 / (self.value * std::f64::consts::LN_2),
        ))
    }

    /// `max(x, 0)`; the derivative at exactly zero is zero.
    pub fn relu(self) -> Self {
        if self.value > 0.0 {
            self.unary(self.value, Op::Relu, 1.0)
        } else {
            self.unary(0.0, Op::Relu, 0.0)
        }
    }

    /// Smaller of two values; the gradient goes to the smaller argument, to
    /// `self` on ties.
    pub fn min2(self, other: Self) -> Self {
        if other.value < self.value {
            self.binary(other, other.value, Op::Min2, 0.0, 1.0)
        } else {
            self.binary(other, self.value, Op::Min2, 1.0, 0.0)
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, Op::Add, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, Op::Sub, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, Op::Mul, rhs.value, self.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(-self.value, Op::Neg, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.affine(1.0, rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.affine(1.0, -rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.affine(rhs, 0.0)
    }
}
