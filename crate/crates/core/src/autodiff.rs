//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Node ids
//! increase monotonically, so walking ids from the loss downwards visits the
//! graph in reverse topological order. Gradients are only propagated through
//! nodes that (transitively) depend on a parameter leaf; constants and
//! detached values cost nothing during the backward pass.
//!
//! ```
//! use fedcil::autodiff::Tape;
//! use fedcil::Tensor;
//!
//! let tape = Tape::new();
//! let w = tape.param(Tensor::new(vec![2], vec![2.0, -3.0]).unwrap());
//! let loss = w.mul(w).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[4.0, -6.0]);
//! ```

use std::cell::RefCell;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Clamp applied inside every logarithm of a probability.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowBias(usize, usize),
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(usize, usize),
    Sum(usize),
    Mean(usize),
    GatherRows(usize, Vec<usize>),
    SelectCols(usize, Vec<usize>),
    CrossEntropy(usize, usize),
    KlDivergence(usize, usize),
    BinaryCrossEntropy(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    frozen: bool,
}

/// Records operations for a single forward/backward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
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

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but returns zeros of the right shape when absent.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.tape.inner.borrow().nodes[var.id].value.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Constant, false)
    }

    /// Copies the current value of `v` into a new constant; no gradient flows back.
    pub fn detach(&self, v: Var<'_>) -> Var<'_> {
        self.constant(v.value())
    }

    /// Forward-only Gaussian sample with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(&self, shape: &[usize], std: f64, rng: &mut R) -> Var<'_> {
        self.constant(Tensor::randn(shape, std, rng))
    }

    /// Forward-only Bernoulli(p) sample of 0/1 values.
    pub fn bernoulli<R: Rng + ?Sized>(&self, shape: &[usize], p: f64, rng: &mut R) -> Var<'_> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            .collect();
        self.constant(Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_frozen(&self) -> bool {
        self.inner.borrow().frozen
    }

    /// Drops all recorded nodes and returns to recording mode.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.frozen = false;
    }

    fn push_unchecked(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        let needs_grad = {
            let inner = self.inner.borrow();
            if inner.frozen {
                return Err(Error::State("tape is frozen after backward".into()));
            }
            parents.iter().any(|&p| inner.nodes[p].needs_grad)
        };
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    /// Runs reverse-mode accumulation from a scalar `loss`; freezes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.frozen {
            return Err(Error::State("backward already called on this tape".into()));
        }
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                inner.nodes[loss.id].value.shape()
            )));
        }
        inner.frozen = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                backprop(nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| nodes[id].needs_grad)
                    .map(|g| Tensor::from_parts(nodes[id].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            for &p in [a, b] {
                if let Some(ga) = acc(grads, nodes, p) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * vb[i];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
        }
        Op::AddRowBias(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            let n = nodes[*b].value.len();
            if let Some(gb) = acc(grads, nodes, *b) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let (va, vb) = (ta.data(), tb.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = dC · Bᵀ
                gemm_nt(g, vb, ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = Aᵀ · dC
                gemm_tn(va, g, gb, m, k, n);
            }
        }
        Op::MatMulBt(a, b) => {
            // C = A · Bᵀ, A: m×k, B: n×k
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
            let (va, vb) = (ta.data(), tb.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = dC · B
                gemm_nn(g, vb, ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = dCᵀ · A
                gemm_tn(g, va, gb, m, n, k);
            }
        }
        Op::LeakyRelu(a, alpha) => {
            let va = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += if va[i] > 0.0 { g[i] } else { alpha * g[i] };
                }
            }
        }
        Op::Tanh(a) => {
            let y = out.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let y = out.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        ga[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if let Some(gp) = acc(grads, nodes, p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(x, y)| *x += y);
                }
                offset += n;
            }
        }
        Op::ConcatCols(a, b) => {
            let (ca, cb) = (nodes[*a].value.cols(), nodes[*b].value.cols());
            let c = ca + cb;
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, row) in g.chunks(c).enumerate() {
                    ga[r * ca..(r + 1) * ca]
                        .iter_mut()
                        .zip(&row[..ca])
                        .for_each(|(x, y)| *x += y);
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (r, row) in g.chunks(c).enumerate() {
                    gb[r * cb..(r + 1) * cb]
                        .iter_mut()
                        .zip(&row[ca..])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0] / n);
            }
        }
        Op::GatherRows(a, idx) => {
            let c = nodes[*a].value.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    ga[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::SelectCols(a, idx) => {
            let c = nodes[*a].value.cols();
            let k = idx.len();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, row) in g.chunks(k).enumerate() {
                    for (j, &src) in idx.iter().enumerate() {
                        ga[r * c + src] += row[j];
                    }
                }
            }
        }
        Op::CrossEntropy(p, t) => {
            let (tp, tt) = (&nodes[*p].value, &nodes[*t].value);
            let b = tp.rows() as f64;
            let (vp, vt) = (tp.data(), tt.data());
            if let Some(gp) = acc(grads, nodes, *p) {
                for i in 0..vp.len() {
                    if vp[i] > LOG_EPS {
                        gp[i] -= g[0] * vt[i] / (vp[i] * b);
                    }
                }
            }
            if let Some(gt) = acc(grads, nodes, *t) {
                for i in 0..vt.len() {
                    gt[i] -= g[0] * vp[i].max(LOG_EPS).ln() / b;
                }
            }
        }
        Op::KlDivergence(p, q) => {
            let (tp, tq) = (&nodes[*p].value, &nodes[*q].value);
            let b = tp.rows() as f64;
            let (vp, vq) = (tp.data(), tq.data());
            if let Some(gp) = acc(grads, nodes, *p) {
                for i in 0..vp.len() {
                    let indicator = if vp[i] > LOG_EPS { 1.0 } else { 0.0 };
                    gp[i] += g[0]
                        * (vp[i].max(LOG_EPS).ln() - vq[i].max(LOG_EPS).ln() + indicator)
                        / b;
                }
            }
            if let Some(gq) = acc(grads, nodes, *q) {
                for i in 0..vq.len() {
                    if vq[i] > LOG_EPS {
                        gq[i] -= g[0] * vp[i] / (vq[i] * b);
                    }
                }
            }
        }
        Op::BinaryCrossEntropy(p, t) => {
            let (tp, tt) = (&nodes[*p].value, &nodes[*t].value);
            let n = tp.len() as f64;
            let (vp, vt) = (tp.data(), tt.data());
            if let Some(gp) = acc(grads, nodes, *p) {
                for i in 0..vp.len() {
                    let mut d = 0.0;
                    if vp[i] > LOG_EPS {
                        d -= vt[i] / vp[i];
                    }
                    if 1.0 - vp[i] > LOG_EPS {
                        d += (1.0 - vt[i]) / (1.0 - vp[i]);
                    }
                    gp[i] += g[0] * d / n;
                }
            }
            if let Some(gt) = acc(grads, nodes, *t) {
                for i in 0..vt.len() {
                    let d = vp[i].max(LOG_EPS).ln() - (1.0 - vp[i]).max(LOG_EPS).ln();
                    gt[i] -= g[0] * d / n;
                }
            }
        }
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// First element of the forward value (for scalar losses).
    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    fn with_value<T>(&self, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    fn with_values<T>(&self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> T) -> T {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes[self.id].value, &inner.nodes[other.id].value)
    }

    fn same_tape(&self, other: Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("vars belong to different tapes".into()))
        }
    }

    fn zip_same_shape(
        self,
        other: Var<'t>,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_tape(other)?;
        self.with_values(other, |a, b| {
            if a.shape() != b.shape() {
                return Err(dim_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })
    }

    fn map(self, f: impl Fn(f64) -> f64) -> Tensor {
        self.with_value(|a| {
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same_shape(other, "add", |x, y| x + y)?;
        self.tape.record(v, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same_shape(other, "sub", |x, y| x - y)?;
        self.tape.record(v, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_same_shape(other, "mul", |x, y| x * y)?;
        self.tape.record(v, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.map(|x| s * x);
        self.tape
            .record(v, Op::Scale(self.id, s), &[self.id])
            .expect("scale on frozen tape")
    }

    /// Adds a length-`n` bias vector to every row of an `m×n` matrix.
    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let v = self.with_values(bias, |a, b| {
            let n = a.cols();
            if a.rank() != 2 || b.len() != n {
                return Err(dim_err!(
                    "row bias of length {} on {:?}",
                    b.len(),
                    a.shape()
                ));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })?;
        self.tape
            .record(v, Op::AddRowBias(self.id, bias.id), &[self.id, bias.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.with_values(other, |a, b| {
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                return Err(dim_err!("matmul {:?} · {:?}", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            gemm_nn(a.data(), b.data(), &mut out, m, k, n);
            Ok(Tensor::from_parts(vec![m, n], out))
        })?;
        self.tape
            .record(v, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// `self · otherᵀ`.
    pub fn matmul_bt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.with_values(other, |a, b| {
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
                return Err(dim_err!("matmul_bt {:?} · {:?}ᵀ", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            let mut out = vec![0.0; m * n];
            gemm_nt(a.data(), b.data(), &mut out, m, k, n);
            Ok(Tensor::from_parts(vec![m, n], out))
        })?;
        self.tape
            .record(v, Op::MatMulBt(self.id, other.id), &[self.id, other.id])
    }

    pub fn leaky_relu(self, alpha: f64) -> Var<'t> {
        let v = self.map(|x| if x > 0.0 { x } else { alpha * x });
        self.tape
            .record(v, Op::LeakyRelu(self.id, alpha), &[self.id])
            .expect("leaky_relu on frozen tape")
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.map(f64::tanh);
        self.tape
            .record(v, Op::Tanh(self.id), &[self.id])
            .expect("tanh on frozen tape")
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.tape
            .record(v, Op::Sigmoid(self.id), &[self.id])
            .expect("sigmoid on frozen tape")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(self) -> Result<Var<'t>> {
        let v = self.with_value(|a| {
            if a.rank() != 2 || a.cols() == 0 {
                return Err(dim_err!("softmax needs a non-empty matrix, got {:?}", a.shape()));
            }
            Ok(softmax_rows(a))
        })?;
        self.tape.record(v, Op::Softmax(self.id), &[self.id])
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        for p in parts {
            first.same_tape(*p)?;
        }
        let tape = first.tape;
        let v = {
            let inner = tape.inner.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|p| &inner.nodes[p.id].value).collect();
            Tensor::concat_rows(&refs)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record(v, Op::ConcatRows(ids.clone()), &ids)
    }

    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.with_values(other, |a, b| {
            if a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() {
                return Err(dim_err!("concat_cols {:?} | {:?}", a.shape(), b.shape()));
            }
            let (ca, cb) = (a.cols(), b.cols());
            let mut data = Vec::with_capacity(a.len() + b.len());
            for r in 0..a.rows() {
                data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
                data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
            }
            Ok(Tensor::from_parts(vec![a.rows(), ca + cb], data))
        })?;
        self.tape
            .record(v, Op::ConcatCols(self.id, other.id), &[self.id, other.id])
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.with_value(|a| a.data().iter().sum::<f64>());
        self.tape
            .record(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
            .expect("sum on frozen tape")
    }

    pub fn mean(self) -> Var<'t> {
        let s = self.with_value(|a| a.data().iter().sum::<f64>() / a.len() as f64);
        self.tape
            .record(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
            .expect("mean on frozen tape")
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.with_value(|a| a.select_rows(idx))?;
        self.tape
            .record(v, Op::GatherRows(self.id, idx.to_vec()), &[self.id])
    }

    pub fn select_cols(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.with_value(|a| {
            if a.rank() != 2 || idx.is_empty() {
                return Err(dim_err!("select_cols on {:?}", a.shape()));
            }
            let c = a.cols();
            if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
                return Err(Error::Range(format!("column {bad} out of {c}")));
            }
            let data = (0..a.rows())
                .flat_map(|r| idx.iter().map(move |&j| (r, j)))
                .map(|(r, j)| a.data()[r * c + j])
                .collect();
            Ok(Tensor::from_parts(vec![a.rows(), idx.len()], data))
        })?;
        self.tape
            .record(v, Op::SelectCols(self.id, idx.to_vec()), &[self.id])
    }

    /// Mean over rows of `−Σ_j t_j·ln(max(p_j, 1e-12))`; `self` holds probabilities.
    pub fn cross_entropy(self, targets: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(targets)?;
        let v = self.with_values(targets, |p, t| {
            if p.shape() != t.shape() || p.rank() != 2 {
                return Err(dim_err!("cross_entropy {:?} vs {:?}", p.shape(), t.shape()));
            }
            let s: f64 = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(&pi, &ti)| if ti == 0.0 { 0.0 } else { -ti * pi.max(LOG_EPS).ln() })
                .sum();
            Ok(Tensor::scalar(s / p.rows() as f64))
        })?;
        self.tape
            .record(v, Op::CrossEntropy(self.id, targets.id), &[self.id, targets.id])
    }

    /// Mean over rows of `KL(self ‖ q) = Σ_j p_j·ln(p_j / q_j)`.
    pub fn kl_divergence(self, q: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(q)?;
        let v = self.with_values(q, |p, q| {
            if p.shape() != q.shape() || p.rank() != 2 {
                return Err(dim_err!("kl_divergence {:?} vs {:?}", p.shape(), q.shape()));
            }
            Ok(Tensor::scalar(kl_rows(p, q)))
        })?;
        self.tape
            .record(v, Op::KlDivergence(self.id, q.id), &[self.id, q.id])
    }

    /// Mean over all entries of binary cross-entropy; `self` holds probabilities.
    pub fn binary_cross_entropy(self, targets: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(targets)?;
        let v = self.with_values(targets, |p, t| {
            if p.shape() != t.shape() {
                return Err(dim_err!("bce {:?} vs {:?}", p.shape(), t.shape()));
            }
            let s: f64 = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(&pi, &ti)| {
                    -(ti * pi.max(LOG_EPS).ln() + (1.0 - ti) * (1.0 - pi).max(LOG_EPS).ln())
                })
                .sum();
            Ok(Tensor::scalar(s / p.len() as f64))
        })?;
        self.tape.record(
            v,
            Op::BinaryCrossEntropy(self.id, targets.id),
            &[self.id, targets.id],
        )
    }
}

pub(crate) fn softmax_rows(a: &Tensor) -> Tensor {
    let c = a.cols();
    let mut data = a.data().to_vec();
    for row in data.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn kl_rows(p: &Tensor, q: &Tensor) -> f64 {
    let s: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                pi * (pi.max(LOG_EPS).ln() - qi.max(LOG_EPS).ln())
            }
        })
        .sum();
    s / p.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let tape = Tape::new();
        let i = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(mat(&[&[3.0, 4.0], &[5.0, 6.0]]));
        assert_eq!(i.matmul(b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let a = tape.constant(mat(&[&[1.0, 2.0]]));
        let c = tape.constant(mat(&[&[3.0], &[4.0]]));
        assert_eq!(a.matmul(c).unwrap().value().data(), &[11.0]);
        assert!(matches!(a.matmul(a), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradient_on_sum() {
        let tape = Tape::new();
        let a = tape.param(mat(&[&[1.0, 2.0]]));
        let b = tape.constant(mat(&[&[3.0], &[4.0]]));
        let loss = a.matmul(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let s = tape.constant(mat(&[&[0.0, 0.0]])).softmax().unwrap().value();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = tape.constant(mat(&[&[1000.0, 0.0]])).softmax().unwrap().value();
        assert_eq!(s.data(), &[1.0, 0.0]);
        let s = tape
            .constant(mat(&[&[1f64.ln(), 3f64.ln()]]))
            .softmax()
            .unwrap()
            .value();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let p = tape.constant(mat(&[&[1.0, 0.0]]));
        let t = tape.constant(mat(&[&[1.0, 0.0]]));
        assert!(p.cross_entropy(t).unwrap().item() <= 1e-11);
        let p = tape.constant(mat(&[&[0.5, 0.5]]));
        let ce = p.cross_entropy(t).unwrap().item();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
        let bad = tape.constant(mat(&[&[0.5, 0.25, 0.25]]));
        assert!(matches!(bad.cross_entropy(t), Err(Error::Dimension(_))));
    }

    #[test]
    fn cross_entropy_logit_gradient_is_softmax_minus_target() {
        let tape = Tape::new();
        let logits = tape.param(mat(&[&[0.3, -1.2, 2.0]]));
        let t = tape.constant(mat(&[&[0.0, 1.0, 0.0]]));
        let p = logits.softmax().unwrap();
        let probs = p.value();
        let loss = p.cross_entropy(t).unwrap();
        let g = tape.backward(loss).unwrap();
        let gl = g.get(logits).unwrap();
        for j in 0..3 {
            let expected = probs.data()[j] - t.value().data()[j];
            assert!((gl.data()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        let tape = Tape::new();
        let p = tape.constant(mat(&[&[0.3, 0.7]]));
        assert_eq!(p.kl_divergence(p).unwrap().item(), 0.0);
        let p = tape.constant(mat(&[&[0.5, 0.5]]));
        let q = tape.constant(mat(&[&[0.25, 0.75]]));
        let kl = p.kl_divergence(q).unwrap().item();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn backward_contracts() {
        let tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
        let loss = w.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 6]);
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
        assert!(tape.is_frozen());
        assert!(matches!(w.add(w), Err(Error::State(_))));
        tape.reset();
        assert!(!tape.is_frozen());
        assert!(tape.is_empty());
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2], vec![2.0, -3.0]).unwrap());
        let g = tape.backward(w.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0, -6.0]);
    }

    #[test]
    fn bce_limits() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let t = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        assert!(p.binary_cross_entropy(t).unwrap().item() < 1e-11);
        let half = tape.constant(Tensor::full(&[3, 1], 0.5));
        let ones = tape.constant(Tensor::full(&[3, 1], 1.0));
        let v = half.binary_cross_entropy(ones).unwrap().item();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
