//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Parameters enter
//! through [`Tape::param`], which ties a node to a [`ParamStore`] slot; calling
//! [`Tape::backward`] accumulates adjoints back to those slots.
//!
//! Binary elementwise primitives broadcast in three limited ways: identical
//! shapes, a one-element operand against anything, and a rank-2 `[r, c]`
//! against a rank-1 `[c]` row.

use std::collections::HashMap;
use std::sync::Arc;

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a custom primitive.
///
/// Receives the adjoint of the output and, per input, whether that input needs
/// a gradient. Returns one optional gradient per input.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + Send + Sync>;

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    ScalarLeft,
    ScalarRight,
    RowRight(usize),
    RowLeft(usize),
}

impl Bcast {
    #[inline]
    fn idx(self, i: usize) -> (usize, usize) {
        match self {
            Bcast::Same => (i, i),
            Bcast::ScalarLeft => (0, i),
            Bcast::ScalarRight => (i, 0),
            Bcast::RowRight(c) => (i, i % c),
            Bcast::RowLeft(c) => (i % c, i),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Neg,
    Scale(f64),
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Square,
}

enum Op {
    Leaf,
    Param(usize),
    Binary(BinKind, Bcast, Var, Var),
    Unary(UnKind, Var),
    MatMul(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later reverse accumulation.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    version: u64,
}

fn check(op: &'static str, t: &Tensor, allow_neg_inf: bool) -> Result<()> {
    let ok = t
        .data()
        .iter()
        .all(|v| v.is_finite() || (allow_neg_inf && *v == f64::NEG_INFINITY));
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
    let la: usize = a.iter().product();
    let lb: usize = b.iter().product();
    if a == b {
        Ok((Bcast::Same, a.to_vec()))
    } else if lb == 1 {
        Ok((Bcast::ScalarRight, a.to_vec()))
    } else if la == 1 {
        Ok((Bcast::ScalarLeft, b.to_vec()))
    } else if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        Ok((Bcast::RowRight(b[0]), a.to_vec()))
    } else if a.len() == 1 && b.len() == 2 && b[1] == a[0] {
        Ok((Bcast::RowLeft(a[0]), b.to_vec()))
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log Σ exp(x)`; `-inf` when every entry is `-inf` or the slice is empty.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    if lse == f64::NEG_INFINITY {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - lse).exp()).collect()
}

fn matmul_dims(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(usize, usize, usize, Vec<usize>)> {
    let err = || Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    };
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok((a[0], a[1], b[1], vec![a[0], b[1]])),
        (2, 1) if a[1] == b[0] => Ok((a[0], a[1], 1, vec![a[0]])),
        (1, 2) if a[0] == b[0] => Ok((1, a[0], b[1], vec![b[1]])),
        _ => Err(err()),
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

impl Tape {
    /// Starts a tape bound to the current version of `store`.
    pub fn new(store: &ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            version: store.version(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a parameter slot. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        self.param_by_id(store, id)
    }

    pub fn param_by_id(&mut self, store: &ParamStore, id: usize) -> Result<Var> {
        if store.version() != self.version {
            return Err(Error::StaleTape {
                recorded: self.version,
                current: store.version(),
            });
        }
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push_shared(store.shared(id), Op::Param(id), true);
        self.params.insert(id, v);
        Ok(v)
    }

    fn binary(&mut self, kind: BinKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (bc, shape) = bcast(name, ta.shape(), tb.shape())?;
        let (da, db) = (ta.data(), tb.data());
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let out: Vec<f64> = match bc {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let (ia, ib) = bc.idx(i);
                    f(da[ia], db[ib])
                })
                .collect(),
        };
        let t = Tensor::new(shape, out)?;
        check(name, &t, matches!(kind, BinKind::Add | BinKind::Sub))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Binary(kind, bc, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, "subtract", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, "multiply", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, "divide", a, b)
    }

    fn unary(&mut self, kind: UnKind, name: &'static str, a: Var) -> Result<Var> {
        let t = self.nodes[a.0].value.map(|x| match kind {
            UnKind::Neg => -x,
            UnKind::Scale(c) => c * x,
            UnKind::Exp => x.exp(),
            UnKind::Log => x.ln(),
            UnKind::Tanh => x.tanh(),
            UnKind::Sigmoid => sigmoid(x),
            UnKind::Softplus => softplus(x),
            UnKind::Relu => x.max(0.0),
            UnKind::Square => x * x,
        });
        check(name, &t, matches!(kind, UnKind::Log))?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Unary(kind, a), rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Neg, "neg", a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnKind::Scale(c), "scale", a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Exp, "exp", a)
    }

    /// Natural log; `log 0 = -inf` is allowed as a log-weight sentinel.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Log, "log", a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Tanh, "tanh", a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Sigmoid, "sigmoid", a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Softplus, "softplus", a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Relu, "relu", a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Square, "square", a)
    }

    /// Matrix product for `[m,k]·[k,n]`, `[m,k]·[k]` and `[k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n, shape) = matmul_dims("matmul", ta.shape(), tb.shape())?;
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(shape, out)?;
        check("matmul", &t, false)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Softmax over all entries.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let t = Tensor::new(ta.shape().to_vec(), softmax_slice(ta.data()))?;
        check("softmax", &t, false)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// `x - logsumexp(x)`; `-inf` entries stay `-inf` (masked logits).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let lse = log_sum_exp(ta.data());
        let t = ta.map(|v| v - lse);
        check("log_softmax", &t, true)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSoftmax(a), rg))
    }

    /// `log Σ exp(x)` over all entries, as a scalar.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(log_sum_exp(self.nodes[a.0].value.data()));
        check("log_sum_exp", &t, true)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSumExp(a), rg))
    }

    /// `out[i] = a.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(
        &mut self,
        a: Var,
        indices: impl Into<Arc<[usize]>>,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let indices: Arc<[usize]> = indices.into();
        let ta = &self.nodes[a.0].value;
        let len: usize = shape.iter().product();
        if len != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: vec![indices.len()],
                right: shape,
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.len()) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: ta.shape().to_vec(),
                right: vec![bad],
            });
        }
        let d = ta.data();
        let t = Tensor::new(shape, indices.iter().map(|&i| d[i]).collect())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Gather(a, indices), rg))
    }

    /// Single element of a tensor as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        self.gather(a, vec![index], vec![])
    }

    /// Contiguous range of the flattened tensor as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(a, idx, vec![len])
    }

    /// Concatenates the flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.nodes[p.0].value.data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.nodes[a.0].value.sum());
        check("sum", &t, true)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.is_empty() {
            return Err(Error::EmptySamples);
        }
        let t = Tensor::scalar(ta.sum() / ta.len() as f64);
        check("mean", &t, false)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Mean(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = (*self.nodes[a.0].value).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Sum of scalars, `0` for an empty list.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        match terms {
            [] => Ok(self.scalar(0.0)),
            [one] => Ok(*one),
            _ => {
                let c = self.concat(terms)?;
                self.sum(c)
            }
        }
    }

    /// `Σ coeffs[i] * terms[i]` over scalar terms, with constant coefficients.
    pub fn weighted_sum(&mut self, terms: &[Var], coeffs: &[f64]) -> Result<Var> {
        if terms.len() != coeffs.len() {
            return Err(Error::LengthMismatch(terms.len(), coeffs.len()));
        }
        if terms.is_empty() {
            return Ok(self.scalar(0.0));
        }
        let c = self.concat(terms)?;
        let w = self.constant(Tensor::vector(coeffs.to_vec()));
        let p = self.mul(c, w)?;
        self.sum(p)
    }

    /// Records a primitive whose value was computed outside the tape.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: CustomBackward,
    ) -> Result<Var> {
        check(name, &value, true)?;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(value, Op::Custom(inputs.to_vec(), backward), rg))
    }

    /// Reverse accumulation from `root` with adjoint `seed`.
    ///
    /// Slots that are not reached are absent from the result (read as zero).
    pub fn backward(&self, store: &ParamStore, root: Var, seed: &Tensor) -> Result<Gradients> {
        if store.version() != self.version {
            return Err(Error::StaleTape {
                recorded: self.version,
                current: store.version(),
            });
        }
        let out = &self.nodes[root.0].value;
        if out.shape() != seed.shape() && !(out.len() == 1 && seed.len() == 1) {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                left: out.shape().to_vec(),
                right: seed.shape().to_vec(),
            });
        }
        let mut grads = Gradients::zeros(store);
        let mut adj: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(seed.clone().reshaped(out.shape().to_vec())?);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut adj, &mut grads);
        }
        Ok(grads)
    }

    /// Backward from a scalar root with unit seed.
    pub fn grad(&self, store: &ParamStore, root: Var) -> Result<Gradients> {
        self.backward(store, root, &Tensor::scalar(1.0))
    }

    fn acc(&self, adj: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = adj[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
        grads: &mut Gradients,
    ) {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => grads.accumulate(*id, 1.0, g),
            Op::Binary(kind, bc, a, b) => {
                let da = self.nodes[a.0].value.data();
                let db = self.nodes[b.0].value.data();
                let (kind, bc) = (*kind, *bc);
                self.acc(adj, *a, |ga| {
                    for (i, &gi) in gd.iter().enumerate() {
                        let (ia, ib) = bc.idx(i);
                        ga[ia] += match kind {
                            BinKind::Add | BinKind::Sub => gi,
                            BinKind::Mul => gi * db[ib],
                            BinKind::Div => gi / db[ib],
                        };
                    }
                });
                self.acc(adj, *b, |gb| {
                    for (i, &gi) in gd.iter().enumerate() {
                        let (ia, ib) = bc.idx(i);
                        gb[ib] += match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * da[ia],
                            BinKind::Div => -gi * da[ia] / (db[ib] * db[ib]),
                        };
                    }
                });
            }
            Op::Unary(kind, a) => {
                let x = self.nodes[a.0].value.data();
                let kind = *kind;
                self.acc(adj, *a, |ga| {
                    for i in 0..gd.len() {
                        ga[i] += gd[i]
                            * match kind {
                                UnKind::Neg => -1.0,
                                UnKind::Scale(c) => c,
                                UnKind::Exp => y[i],
                                UnKind::Log => 1.0 / x[i],
                                UnKind::Tanh => 1.0 - y[i] * y[i],
                                UnKind::Sigmoid => y[i] * (1.0 - y[i]),
                                UnKind::Softplus => sigmoid(x[i]),
                                UnKind::Relu => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnKind::Square => 2.0 * x[i],
                            };
                    }
                });
            }
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k, n, _) =
                    matmul_dims("matmul", ta.shape(), tb.shape()).expect("checked in forward");
                let (da, db) = (ta.data(), tb.data());
                // dA[m×k] = G[m×n] · Bᵀ
                self.acc(adj, *a, |ga| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB[k×n] = Aᵀ · G
                self.acc(adj, *b, |gb| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = da[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (gv, &gg) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *gv += aip * gg;
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let dot: f64 = gd.iter().zip(y).map(|(g, s)| g * s).sum();
                self.acc(adj, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += y[i] * (gd[i] - dot);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let total: f64 = gd.iter().sum();
                self.acc(adj, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] - y[i].exp() * total;
                    }
                });
            }
            Op::LogSumExp(a) => {
                let p = softmax_slice(self.nodes[a.0].value.data());
                let g0 = gd[0];
                self.acc(adj, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g0 * p[i];
                    }
                });
            }
            Op::Gather(a, idx) => {
                self.acc(adj, *a, |ga| {
                    for (o, &i) in idx.iter().enumerate() {
                        ga[i] += gd[o];
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.acc(adj, *p, |gp| {
                        for i in 0..len {
                            gp[i] += gd[off + i];
                        }
                    });
                    off += len;
                }
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.acc(adj, *a, |ga| ga.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let g0 = gd[0] / n;
                self.acc(adj, *a, |ga| ga.iter_mut().for_each(|v| *v += g0));
            }
            Op::Reshape(a) => {
                self.acc(adj, *a, |ga| {
                    for (x, v) in ga.iter_mut().zip(gd) {
                        *x += v;
                    }
                });
            }
            Op::Custom(inputs, backward) => {
                let needs: Vec<bool> = inputs.iter().map(|v| self.rg(*v)).collect();
                if !needs.iter().any(|&b| b) {
                    return;
                }
                let local = backward(g, &needs);
                for (v, lg) in inputs.iter().zip(local) {
                    if let Some(lg) = lg {
                        self.acc(adj, *v, |ga| {
                            for (x, d) in ga.iter_mut().zip(lg.data()) {
                                *x += d;
                            }
                        });
                    }
                }
            }
        }
    }
}
