//! Reverse-mode autodiff over an append-only tape.
//!
//! Every operation pushes a node holding its forward value and the ids of
//! its inputs. Node ids are therefore already in topological order, and
//! backward is a single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Relu,
    Ln,
    Sqrt,
    Exp,
    Pow(f64),
}

#[derive(Clone, Copy, Debug)]
enum RowOp {
    Add,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Row(usize, usize, RowOp),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(usize, Unary),
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Transpose(usize),
    Reshape(usize),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    Gather(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    NormalizeRows(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Adds each reachable parameter's gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(pid, g);
            }
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

/// (outer, len, inner) strides for iterating along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var<'_>> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Input that takes no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false, "constant")
            .expect("Tensor values are finite by construction")
    }

    /// Input whose gradient is tracked.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, "leaf")
            .expect("Tensor values are finite by construction")
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let v = self.leaf(store.value(id).clone());
        self.nodes.borrow_mut()[v.id].param = Some(id);
        v
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn emit(&self, value: Tensor, op: Op, inputs: &[usize], name: &'static str) -> Result<Var<'_>> {
        let rg = self.needs(inputs);
        self.push(value, op, rg, name)
    }

    /// Stacks rank-2 tensors side by side along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Domain("concat of zero tensors".into()))?;
        let rows = first.value().dims2("concat_cols")?.0;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            let (r, c) = v.dims2("concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", &vals[0], v));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.emit(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(ids.clone()),
            &ids,
            "concat_cols",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let mut send = |target: usize, contrib: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let bt = transpose_raw(bv.data(), k, n);
                    let da = matmul_raw(g.data(), &bt, m, n, k);
                    send(*a, Tensor::from_parts(vec![m, k], da));
                    let at = transpose_raw(av.data(), m, k);
                    let db = matmul_raw(&at, g.data(), k, m, n);
                    send(*b, Tensor::from_parts(vec![k, n], db));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let da = g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                    let db = g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect();
                    send(*a, Tensor::from_parts(av.shape().to_vec(), da));
                    send(*b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
                Op::Row(x, v, kind) => {
                    let (xv, vv) = (&nodes[*x].value, &nodes[*v].value);
                    let n = vv.numel();
                    let mut dx = g.data().to_vec();
                    let mut dv = vec![0.0; n];
                    for (i, gi) in g.data().iter().enumerate() {
                        let j = i % n;
                        match kind {
                            RowOp::Add => dv[j] += gi,
                            RowOp::Mul => {
                                dx[i] = gi * vv.data()[j];
                                dv[j] += gi * xv.data()[i];
                            }
                            RowOp::Div => {
                                let d = vv.data()[j];
                                dx[i] = gi / d;
                                dv[j] -= gi * xv.data()[i] / (d * d);
                            }
                        }
                    }
                    send(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                    send(*v, Tensor::from_parts(vv.shape().to_vec(), dv));
                }
                Op::Scale(a, c) => send(*a, g.map(|v| v * c)),
                Op::AddScalar(a) => send(*a, g),
                Op::Unary(a, kind) => {
                    let x = &nodes[*a].value;
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(y.data())
                        .map(|((&g, &x), &y)| {
                            g * match *kind {
                                Unary::Sigmoid => y * (1.0 - y),
                                Unary::Relu => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Ln => 1.0 / x,
                                Unary::Sqrt => 0.5 / y,
                                Unary::Exp => y,
                                Unary::Pow(e) => {
                                    if e == 0.0 || (x == 0.0 && e < 1.0) {
                                        0.0
                                    } else {
                                        e * x.powf(e - 1.0)
                                    }
                                }
                            }
                        })
                        .collect();
                    send(*a, Tensor::from_parts(x.shape().to_vec(), d));
                }
                Op::Softmax(a, axis) => {
                    let (outer, len, inner) = axis_split(y.shape(), *axis);
                    let mut d = vec![0.0; y.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
                            for j in 0..len {
                                d[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dot);
                            }
                        }
                    }
                    send(*a, Tensor::from_parts(y.shape().to_vec(), d));
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = &nodes[*x].value;
                    let gv = &nodes[*gain].value;
                    let n = last_dim(xv);
                    let rows = xv.numel() / n;
                    let mut dx = vec![0.0; xv.numel()];
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    for r in 0..rows {
                        let xr = &xv.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let mean = xr.iter().sum::<f64>() / n as f64;
                        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = (0..n).map(|j| gr[j] * gv.data()[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                            dx[r * n + j] = inv / n as f64 * (n as f64 * dxhat[j] - s1 - xhat[j] * s2);
                        }
                    }
                    send(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                    send(*gain, Tensor::from_parts(vec![n], dgain));
                    send(*bias, Tensor::from_parts(vec![n], dbias));
                }
                Op::Transpose(a) => {
                    let (m, n) = (y.shape()[0], y.shape()[1]);
                    send(*a, Tensor::from_parts(vec![n, m], transpose_raw(g.data(), m, n)));
                }
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    send(*a, Tensor::from_parts(shape, g.into_data()));
                }
                Op::SliceCols(a, start, end) => {
                    let src = &nodes[*a].value;
                    let (rows, cols) = (src.shape()[0], src.shape()[1]);
                    let w = end - start;
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        d[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    send(*a, Tensor::from_parts(vec![rows, cols], d));
                }
                Op::ConcatCols(parts) => {
                    let rows = y.shape()[0];
                    let total = y.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.shape()[1];
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        send(p, Tensor::from_parts(vec![rows, w], d));
                    }
                }
                Op::Gather(a, idx) => {
                    let src = &nodes[*a].value;
                    let stride: usize = src.shape()[1..].iter().product();
                    let mut d = vec![0.0; src.numel()];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..stride {
                            d[i * stride + j] += g.data()[k * stride + j];
                        }
                    }
                    send(*a, Tensor::from_parts(src.shape().to_vec(), d));
                }
                Op::Sum(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    send(*a, Tensor::full(shape, g.item()));
                }
                Op::Mean(a) => {
                    let src = &nodes[*a].value;
                    let scale = g.item() / src.numel() as f64;
                    send(*a, Tensor::full(src.shape().to_vec(), scale));
                }
                Op::SumLast(a) => {
                    let src = &nodes[*a].value;
                    let n = last_dim(src);
                    let d = (0..src.numel()).map(|i| g.data()[i / n]).collect();
                    send(*a, Tensor::from_parts(src.shape().to_vec(), d));
                }
                Op::NormalizeRows(a) => {
                    let src = &nodes[*a].value;
                    let (rows, cols) = (src.shape()[0], src.shape()[1]);
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let xr = src.row(r);
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yr = y.row(r);
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            d[r * cols + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    send(*a, Tensor::from_parts(vec![rows, cols], d));
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    /// Product of two rank-2 tensors.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", &a, &b));
        }
        let out = matmul_raw(a.data(), b.data(), m, k, n);
        self.tape.emit(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(self.id, rhs.id),
            &[self.id, rhs.id],
            "matmul",
        )
    }

    fn zip_with(self, rhs: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.emit(
            Tensor::from_parts(a.shape().to_vec(), data),
            op,
            &[self.id, rhs.id],
            name,
        )
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "add", Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "sub", Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "mul", Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    fn row_op(self, v: Var<'t>, kind: RowOp, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(&v);
        let (x, vv) = (self.value(), v.value());
        let n = last_dim(&x);
        if vv.rank() != 1 || vv.numel() != n || x.rank() == 0 {
            return Err(mismatch(name, &x, &vv));
        }
        if matches!(kind, RowOp::Div) && vv.data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let b = vv.data()[i % n];
                match kind {
                    RowOp::Add => a + b,
                    RowOp::Mul => a * b,
                    RowOp::Div => a / b,
                }
            })
            .collect();
        self.tape.emit(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::Row(self.id, v.id, kind),
            &[self.id, v.id],
            name,
        )
    }

    /// Adds a vector to every row (last axis).
    pub fn add_row(self, v: Var<'t>) -> Result<Var<'t>> {
        self.row_op(v, RowOp::Add, "add_row")
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(self, v: Var<'t>) -> Result<Var<'t>> {
        self.row_op(v, RowOp::Mul, "mul_row")
    }

    /// Divides every row elementwise by a vector.
    pub fn div_row(self, v: Var<'t>) -> Result<Var<'t>> {
        self.row_op(v, RowOp::Div, "div_row")
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let x = self.value();
        self.tape.emit(x.map(|v| v * c), Op::Scale(self.id, c), &[self.id], "scale")
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let x = self.value();
        self.tape.emit(x.map(|v| v + c), Op::AddScalar(self.id), &[self.id], "add_scalar")
    }

    /// `1 - x`
    pub fn one_minus(self) -> Result<Var<'t>> {
        self.scale(-1.0)?.add_scalar(1.0)
    }

    fn unary(self, kind: Unary, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let x = self.value();
        self.tape.emit(x.map(f), Op::Unary(self.id, kind), &[self.id], name)
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'t>> {
        match kind {
            Activation::Sigmoid => self.sigmoid(),
            Activation::Relu => self.relu(),
        }
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid, "sigmoid", sigmoid)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Unary::Relu, "relu", |v| v.max(0.0))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("ln of non-positive value".into()));
        }
        self.unary(Unary::Ln, "ln", f64::ln)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("sqrt of negative value".into()));
        }
        self.unary(Unary::Sqrt, "sqrt", f64::sqrt)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Unary::Exp, "exp", f64::exp)
    }

    /// Elementwise power with a constant exponent; `x^0 == 1` including at 0.
    pub fn powf(self, e: f64) -> Result<Var<'t>> {
        self.unary(Unary::Pow(e), "powf", move |v| if e == 0.0 { 1.0 } else { v.powf(e) })
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::AxisOutOfRange { axis, rank: x.rank() });
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x.data()[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x.data()[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        self.tape.emit(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax(self.id, axis),
            &[self.id],
            "softmax",
        )
    }

    /// Normalizes over the last axis, then applies `gain * xhat + bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let n = last_dim(&x);
        if x.rank() == 0 || g.shape() != [n] || b.shape() != [n] {
            return Err(mismatch("layer_norm", &x, &g));
        }
        let rows = x.numel() / n;
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * n..(r + 1) * n];
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[r * n + j] = g.data()[j] * (xr[j] - mean) * inv + b.data()[j];
            }
        }
        self.tape.emit(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            &[self.id, gain.id, bias.id],
            "layer_norm",
        )
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (wv, bv) = (w.value(), b.value());
        let (_, d_out) = wv.dims2("linear")?;
        if bv.shape() != [d_out] {
            return Err(mismatch("linear", &wv, &bv));
        }
        self.matmul(w)?.add_row(b)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2("transpose")?;
        self.tape.emit(
            Tensor::from_parts(vec![n, m], transpose_raw(x.data(), m, n)),
            Op::Transpose(self.id),
            &[self.id],
            "transpose",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.tape.emit(
            Tensor::from_parts(shape.to_vec(), x.data().to_vec()),
            Op::Reshape(self.id),
            &[self.id],
            "reshape",
        )
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.dims2("slice_cols")?;
        if start >= end || end > cols {
            return Err(Error::IndexOutOfRange { index: end, len: cols });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        self.tape.emit(
            Tensor::from_parts(vec![rows, w], data),
            Op::SliceCols(self.id, start, end),
            &[self.id],
            "slice_cols",
        )
    }

    /// Selects entries along the first axis; indices may repeat.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(Error::AxisOutOfRange { axis: 0, rank: 0 });
        }
        let len = x.shape()[0];
        let stride: usize = x.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= len {
                return Err(Error::IndexOutOfRange { index: i, len });
            }
            data.extend_from_slice(&x.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        self.tape.emit(
            Tensor::from_parts(shape, data),
            Op::Gather(self.id, indices.to_vec()),
            &[self.id],
            "gather",
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.data().iter().sum();
        self.tape.emit(Tensor::scalar(s), Op::Sum(self.id), &[self.id], "sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.numel() == 0 {
            return Err(Error::Domain("mean of empty tensor".into()));
        }
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.tape.emit(Tensor::scalar(s), Op::Mean(self.id), &[self.id], "mean")
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(Error::AxisOutOfRange { axis: 0, rank: 0 });
        }
        let n = last_dim(&x);
        let data: Vec<f64> = x.data().chunks(n.max(1)).map(|c| c.iter().sum()).collect();
        let shape = x.shape()[..x.rank() - 1].to_vec();
        self.tape.emit(Tensor::from_parts(shape, data), Op::SumLast(self.id), &[self.id], "sum_last")
    }

    /// Scales each row of a rank-2 tensor to unit L2 norm.
    pub fn normalize_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.dims2("normalize_rows")?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = x.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm {
                    op: "normalize_rows",
                    row: r,
                });
            }
            data.extend(row.iter().map(|v| v / norm));
        }
        self.tape.emit(
            Tensor::from_parts(vec![rows, cols], data),
            Op::NormalizeRows(self.id),
            &[self.id],
            "normalize_rows",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let id = tape.constant(Tensor::identity(2));
        let v = tape.constant(t(&[&[5.0], &[6.0]]));
        assert_eq!(id.matmul(v).unwrap().value().data(), &[5.0, 6.0]);

        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        assert_eq!(a.matmul(v).unwrap().value().data(), &[17.0, 39.0]);

        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let y = tape.constant(Tensor::zeros(vec![3, 4]));
        assert_eq!(x.matmul(y).unwrap().shape(), vec![2, 4]);
        assert!(matches!(y.matmul(y), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn activation_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 1.0, -2.0]).unwrap());
        let s = x.sigmoid().unwrap().value();
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 0.7310586).abs() < 1e-7);
        let r = x.relu().unwrap().value();
        assert_eq!(r.data()[2], 0.0);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![2.5; 3]).unwrap());
        for v in c.softmax(0).unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![0.0, 2f64.ln()]).unwrap());
        let y = x.softmax(0).unwrap().value();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(x.softmax(1), Err(Error::AxisOutOfRange { axis: 1, rank: 1 })));
    }

    #[test]
    fn softmax_over_leading_axis() {
        let tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 5.0], &[1.0, -3.0]]));
        let y = x.softmax(0).unwrap().value();
        assert!((y.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((y.at(0, 1) + y.at(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let gain = tape.constant(Tensor::full(vec![2], 1.0));
        let bias = tape.constant(Tensor::zeros(vec![2]));
        let x = tape.constant(t(&[&[1.0, 3.0], &[4.0, 4.0]]));
        let y = x.layer_norm(gain, bias, 0.0 + 1e-300).unwrap().value();
        assert!((y.at(0, 0) + 1.0).abs() < 1e-12);
        assert!((y.at(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(y.row(1), &[0.0, 0.0]);

        let bias = tape.constant(Tensor::vector(vec![0.3, 0.7]).unwrap());
        let y = x.layer_norm(gain, bias, 1e-5).unwrap().value();
        let mean: f64 = y.row(0).iter().sum::<f64>() / 2.0;
        assert!((mean - 0.5).abs() < 1e-12);

        let bad = tape.constant(Tensor::zeros(vec![3]));
        assert!(x.layer_norm(bad, bias, 1e-5).is_err());
    }

    #[test]
    fn linear_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 1.0], &[-2.0, 7.0]]));
        let w0 = tape.constant(Tensor::zeros(vec![2, 2]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = x.linear(w0, b).unwrap().value();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0]);

        let wi = tape.constant(Tensor::identity(2));
        let z = tape.constant(Tensor::zeros(vec![2]));
        assert_eq!(x.linear(wi, z).unwrap().value().data(), x.value().data());

        let x1 = tape.constant(t(&[&[1.0, 1.0]]));
        let w = tape.constant(t(&[&[1.0, 0.0], &[0.0, 2.0]]));
        let b = tape.constant(Tensor::vector(vec![0.5, 0.5]).unwrap());
        assert_eq!(x1.linear(w, b).unwrap().value().data(), &[1.5, 2.5]);
    }

    #[test]
    fn backward_bilinear_and_sigmoid() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.leaf(Tensor::scalar(-4.0));
        let loss = x.mul(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), -4.0);
        assert_eq!(g.get(y).unwrap().item(), 3.0);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let g = tape.backward(x.sigmoid().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn backward_accumulates_into_params() {
        let mut store = ParamStore::new();
        let pid = store.add("w", Tensor::scalar(2.0)).unwrap();
        for _ in 0..2 {
            let tape = Tape::new();
            let w = tape.param(&store, pid);
            let loss = w.mul(w).unwrap();
            tape.backward(loss).unwrap().accumulate_into(&mut store);
        }
        assert_eq!(store.grad(pid).unwrap().item(), 8.0);
        store.zero_grad();
        assert!(store.grad(pid).is_none());
    }

    #[test]
    fn non_finite_outputs_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e308));
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite("scale"))));
        assert!(Tensor::vector(vec![f64::NAN]).is_err());
    }

    #[test]
    fn ops_are_bitwise_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(t(&[&[0.3, -1.2, 2.0], &[0.7, 0.1, -0.4]]));
            let y = x.softmax(1).unwrap().matmul(x.transpose().unwrap()).unwrap();
            let loss = y.sigmoid().unwrap().sum().unwrap();
            let g = tape.backward(loss).unwrap();
            (loss.value().item().to_bits(), g.get(x).unwrap().data().to_vec())
        };
        assert_eq!(run(), run());
    }
}
