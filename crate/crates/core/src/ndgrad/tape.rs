use std::cell::{Cell, Ref, RefCell};

use super::tensor::{matmul_kernel, softmax_kernel, transpose_kernel, Tensor};
use crate::error::{Error, Result};

/// Inputs to `log` are floored here so saturated probabilities never yield `-inf`.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    Sign(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SoftmaxRows(usize),
    Pick(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order so gradients can be replayed backwards.
///
/// Nodes are appended only, which keeps every operation after its inputs.
/// A tape is single-threaded; use one tape per thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    non_finite: Cell<Option<&'static str>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; `None` when `var` does not
    /// require gradients or does not influence the root.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// First non-finite value produced on this tape, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            Some(op) => Err(Error::NonFinite(op)),
            None => Ok(()),
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Var<'_> {
        if self.non_finite.get().is_none() && !value.is_finite() {
            self.non_finite.set(Some(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a scalar root.
    ///
    /// Every node that requires gradients and is reachable from `root`
    /// receives exactly one accumulated gradient.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::contract("backward root belongs to another tape"));
        }
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &nodes[id];
                match g {
                    Some(g) if node.requires_grad => {
                        Some(Tensor::from_raw(node.value.shape().to_vec(), g))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Sums a broadcast gradient back down to the shape of the smaller operand.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for (i, &v) in g.iter().enumerate() {
        out[i % len] += v;
    }
    out
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            let n = nodes[*b].value.shape()[1];
            if nodes[*a].requires_grad {
                // g [m×n] · bᵀ [n×k]
                let bt = transpose_kernel(val(*b), k, n);
                accumulate(grads, nodes, *a, matmul_kernel(g, &bt, m, n, k));
            }
            if nodes[*b].requires_grad {
                // aᵀ [k×m] · g [m×n]
                let at = transpose_kernel(val(*a), m, k);
                accumulate(grads, nodes, *b, matmul_kernel(&at, g, k, m, n));
            }
        }
        Op::Transpose(a) => {
            let shape = node.value.shape();
            accumulate(grads, nodes, *a, transpose_kernel(g, shape[0], shape[1]));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, reduce_to(g, val(*a).len()));
            accumulate(grads, nodes, *b, reduce_to(g, val(*b).len()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, reduce_to(g, val(*a).len()));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(grads, nodes, *b, reduce_to(&neg, val(*b).len()));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let full: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * bv[i % bv.len()])
                    .collect();
                accumulate(grads, nodes, *a, reduce_to(&full, av.len()));
            }
            if nodes[*b].requires_grad {
                let full: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * av[i % av.len()])
                    .collect();
                accumulate(grads, nodes, *b, reduce_to(&full, bv.len()));
            }
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, g.iter().map(|v| v * c).collect());
        }
        Op::Relu(a) => {
            let x = val(*a);
            let d = g
                .iter()
                .zip(x)
                .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Exp(a) => {
            let y = node.value.data();
            accumulate(grads, nodes, *a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect());
        }
        Op::Log(a) => {
            let x = val(*a);
            let d = g
                .iter()
                .zip(x)
                .map(|(gi, &xi)| if xi > LOG_FLOOR { gi / xi } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a);
            let d = g
                .iter()
                .zip(x)
                .map(|(gi, &xi)| if xi >= *lo && xi <= *hi { *gi } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Sign(a) => {
            accumulate(grads, nodes, *a, vec![0.0; val(*a).len()]);
        }
        Op::Sum(a) => {
            accumulate(grads, nodes, *a, vec![g[0]; val(*a).len()]);
        }
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(grads, nodes, *a, vec![g[0] / n as f64; n]);
        }
        Op::SumRows(a) => {
            let c = nodes[*a].value.cols();
            let d = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, c)).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::SoftmaxRows(a) => {
            let y = node.value.data();
            let c = node.value.cols();
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((di, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                    *di = yi * (gi - dot);
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Pick(a, labels) => {
            let c = nodes[*a].value.cols();
            let mut d = vec![0.0; val(*a).len()];
            for (i, (&l, gi)) in labels.iter().zip(g).enumerate() {
                d[i * c + l] = *gi;
            }
            accumulate(grads, nodes, *a, d);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value. Drop it before recording further ops.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize], name: &'static str) -> Var<'t> {
        let requires = self.tape.requires(inputs);
        self.tape.push(value, op, requires, name)
    }

    fn unary(&self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value().map(f);
        self.record(value, op, &[self.id], name)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = self.value().matmul(&other.value())?;
        Ok(self.record(value, Op::MatMul(self.id, other.id), &[self.id, other.id], "matmul"))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = self.value().transpose()?;
        Ok(self.record(value, Op::Transpose(self.id), &[self.id], "transpose"))
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = self.value().zip_with(&other.value(), name, f)?;
        Ok(self.record(value, op, &[self.id, other.id], name))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), "scale", |v| v * c)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), "relu", |v| v.max(0.0))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), "exp", f64::exp)
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn log(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), "log", |v| v.max(LOG_FLOOR).ln())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), "clamp", |v| v.clamp(lo, hi))
    }

    /// Elementwise sign with `sign(0) = 0`.
    pub fn sign(&self) -> Var<'t> {
        self.unary(Op::Sign(self.id), "sign", sign)
    }

    pub fn sum(&self) -> Var<'t> {
        let total: f64 = self.value().data().iter().sum();
        self.record(Tensor::scalar(total), Op::Sum(self.id), &[self.id], "sum")
    }

    pub fn mean(&self) -> Var<'t> {
        let value = {
            let v = self.value();
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        self.record(Tensor::scalar(value), Op::Mean(self.id), &[self.id], "mean")
    }

    /// `[rows, cols] -> [rows]` by summing each row.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let (m, _) = v.expect_matrix("sum_rows")?;
            let sums = v.data().chunks(v.cols()).map(|r| r.iter().sum()).collect();
            Tensor::from_raw(vec![m], sums)
        };
        Ok(self.record(value, Op::SumRows(self.id), &[self.id], "sum_rows"))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let (m, n) = v.expect_matrix("softmax")?;
            Tensor::from_raw(vec![m, n], softmax_kernel(v.data(), m, n))
        };
        Ok(self.record(value, Op::SoftmaxRows(self.id), &[self.id], "softmax"))
    }

    /// `[rows, cols] -> [rows]` selecting column `labels[i]` from row `i`.
    pub fn pick(&self, labels: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let (m, n) = v.expect_matrix("pick")?;
            if labels.len() != m {
                return Err(Error::Dimension {
                    op: "pick",
                    lhs: v.shape().to_vec(),
                    rhs: vec![labels.len()],
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
                return Err(Error::validation(format!(
                    "label {bad} out of range for {n} classes"
                )));
            }
            let data = labels.iter().enumerate().map(|(i, &l)| v.data()[i * n + l]).collect();
            Tensor::from_raw(vec![m], data)
        };
        Ok(self.record(value, Op::Pick(self.id, labels.to_vec()), &[self.id], "pick"))
    }
}

pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
