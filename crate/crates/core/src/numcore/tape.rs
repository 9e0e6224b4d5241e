use std::cell::RefCell;

use super::tensor::{lanes, Tensor};
use super::NumError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Conv2d { x: usize, k: usize, stride: usize },
    AddBias { x: usize, b: usize, axis: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Softmax { x: usize, axis: usize },
    L2Normalize { x: usize, axis: usize, eps: f64, norms: Vec<f64> },
    Norm { x: usize, axis: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Sum(usize),
    SumAxis { x: usize, axis: usize },
    Reshape(usize),
    Transpose(usize),
    SmoothL1 { pred: usize, target: usize, beta: f64 },
    CosineRows { query: usize, keys: usize, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic operation record for reverse-mode differentiation.
///
/// Nodes only ever reference earlier nodes, so insertion order is a
/// topological order and the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> NumError {
    NumError::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<(), NumError> {
    if axis >= shape.len() {
        return Err(NumError::Axis(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn with_value<T>(&self, v: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(dim_err("matmul", sa, sb));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (da, db) = (ta.data(), tb.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = da[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &db[p * n..(p + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::new(&[m, n], out)?
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    /// Valid cross-correlation of `x: [C, H, W]` with `k: [O, C, kh, kw]`.
    pub fn conv2d(&self, x: Var, k: Var, stride: usize) -> Result<Var, NumError> {
        if stride == 0 {
            return Err(NumError::Dimension("conv2d: stride must be >= 1".into()));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tk) = (&nodes[x.0].value, &nodes[k.0].value);
            let (sx, sk) = (tx.shape(), tk.shape());
            if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] || sk[2] > sx[1] || sk[3] > sx[2] {
                return Err(dim_err("conv2d", sx, sk));
            }
            let (c_in, h, w) = (sx[0], sx[1], sx[2]);
            let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
            let ho = (h - kh) / stride + 1;
            let wo = (w - kw) / stride + 1;
            let (dx, dk) = (tx.data(), tk.data());
            let mut out = vec![0.0; c_out * ho * wo];
            for o in 0..c_out {
                let oplane = &mut out[o * ho * wo..(o + 1) * ho * wo];
                for c in 0..c_in {
                    let xplane = &dx[c * h * w..(c + 1) * h * w];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wv = dk[((o * c_in + c) * kh + ki) * kw + kj];
                            for oy in 0..ho {
                                let xrow = &xplane[(oy * stride + ki) * w + kj..];
                                let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                                for (ox, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * xrow[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new(&[c_out, ho, wo], out)?
        };
        let rg = self.rg(&[x.0, k.0]);
        Ok(self.push(out, Op::Conv2d { x: x.0, k: k.0, stride }, rg))
    }

    /// Adds `b` (length `shape[axis]`) broadcast along every other axis.
    pub fn add_bias(&self, x: Var, b: Var, axis: usize) -> Result<Var, NumError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[b.0].value);
            check_axis("add_bias", tx.shape(), axis)?;
            let (outer, len, inner) = lanes(tx.shape(), axis);
            if tb.len() != len {
                return Err(dim_err("add_bias", tx.shape(), tb.shape()));
            }
            let mut out = tx.data().to_vec();
            for o in 0..outer {
                for (a, bv) in tb.data().iter().enumerate() {
                    let base = (o * len + a) * inner;
                    for v in &mut out[base..base + inner] {
                        *v += bv;
                    }
                }
            }
            Tensor::new(tx.shape(), out)?
        };
        let rg = self.rg(&[x.0, b.0]);
        Ok(self.push(out, Op::AddBias { x: x.0, b: b.0, axis }, rg))
    }

    fn zip_op(&self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumError> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.zip_op("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.zip_op("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.zip_op("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(t.shape(), t.data().iter().map(|v| v * c).collect()).expect("same shape")
        };
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Scale(a.0, c), rg)
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect()).expect("same shape")
        };
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Relu(a.0), rg)
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var, NumError> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            check_axis("softmax", t.shape(), axis)?;
            let (outer, len, inner) = lanes(t.shape(), axis);
            let src = t.data();
            let mut out = vec![0.0; src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (src[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        out[idx(j)] /= total;
                    }
                }
            }
            Tensor::new(t.shape(), out)?
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Softmax { x: a.0, axis }, rg))
    }

    /// `x / max(‖x‖₂, eps)` along `axis`.
    pub fn l2_normalize(&self, a: Var, axis: usize, eps: f64) -> Result<Var, NumError> {
        if eps <= 0.0 {
            return Err(NumError::Contract("l2_normalize: eps must be positive".into()));
        }
        let (out, norms) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            check_axis("l2_normalize", t.shape(), axis)?;
            let (outer, len, inner) = lanes(t.shape(), axis);
            let src = t.data();
            let mut out = vec![0.0; src.len()];
            let mut norms = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let n = (0..len).map(|j| src[idx(j)] * src[idx(j)]).sum::<f64>().sqrt();
                    norms.push(n);
                    let denom = n.max(eps);
                    for j in 0..len {
                        out[idx(j)] = src[idx(j)] / denom;
                    }
                }
            }
            (Tensor::new(t.shape(), out)?, norms)
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::L2Normalize { x: a.0, axis, eps, norms }, rg))
    }

    /// Euclidean norm along `axis`; the axis is removed from the shape.
    pub fn norm(&self, a: Var, axis: usize) -> Result<Var, NumError> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            check_axis("norm", t.shape(), axis)?;
            let (outer, len, inner) = lanes(t.shape(), axis);
            let src = t.data();
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..len).map(|j| src[(o * len + j) * inner + i].powi(2)).sum();
                    out.push(s.sqrt());
                }
            }
            Tensor::new(&reduced_shape(t.shape(), axis), out)?
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Norm { x: a.0, axis }, rg))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var, NumError> {
        if inputs.is_empty() {
            return Err(NumError::Contract("concat: no inputs".into()));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[inputs[0].0].value.shape().to_vec();
            check_axis("concat", &first, axis)?;
            let mut total = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                let same_rest =
                    s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
                if !same_rest {
                    return Err(dim_err("concat", &first, s));
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = lanes(&shape, axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let chunk = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(&shape, out)?
        };
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self, a: Var) -> Var {
        let out = self.with_value(a, |t| Tensor::scalar(t.data().iter().sum()));
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Sum(a.0), rg)
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var, NumError> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            check_axis("sum_axis", t.shape(), axis)?;
            let (outer, len, inner) = lanes(t.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += t.data()[(o * len + j) * inner + i];
                    }
                }
            }
            Tensor::new(&reduced_shape(t.shape(), axis), out)?
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::SumAxis { x: a.0, axis }, rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, NumError> {
        let out = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Reshape(a.0), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self, a: Var) -> Result<Var, NumError> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.ndim() != 2 {
                return Err(NumError::Dimension(format!("transpose: expected 2-D, got {:?}", t.shape())));
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = t.data()[i * c + j];
                }
            }
            Tensor::new(&[c, r], out)?
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Transpose(a.0), rg))
    }

    /// Mean over elements of `0.5·x²/β` when `|x| < β`, else `|x| − 0.5·β`.
    pub fn smooth_l1(&self, pred: Var, target: Var, beta: f64) -> Result<Var, NumError> {
        if beta <= 0.0 {
            return Err(NumError::Contract("smooth_l1: beta must be positive".into()));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (tp, tt) = (&nodes[pred.0].value, &nodes[target.0].value);
            if tp.shape() != tt.shape() {
                return Err(dim_err("smooth_l1", tp.shape(), tt.shape()));
            }
            let total: f64 = tp.data().iter().zip(tt.data()).map(|(p, t)| smooth_l1_elem(p - t, beta)).sum();
            Tensor::scalar(total / tp.len() as f64)
        };
        let rg = self.rg(&[pred.0, target.0]);
        Ok(self.push(out, Op::SmoothL1 { pred: pred.0, target: target.0, beta }, rg))
    }

    /// Cosine similarity of `query` (any shape with `n` elements) against each
    /// row of `keys: [m, n]`, giving `[m]`. Denominator is `‖q‖‖k‖ + eps`.
    pub fn cosine_rows(&self, query: Var, keys: Var, eps: f64) -> Result<Var, NumError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tq, tk) = (&nodes[query.0].value, &nodes[keys.0].value);
            if tk.ndim() != 2 || tk.shape()[1] != tq.len() {
                return Err(dim_err("cosine_rows", tq.shape(), tk.shape()));
            }
            let m = tk.shape()[0];
            let qn = tq.norm();
            let out = (0..m)
                .map(|j| {
                    let row = tk.row(j);
                    let dot: f64 = tq.data().iter().zip(row).map(|(a, b)| a * b).sum();
                    let kn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    dot / (qn * kn + eps)
                })
                .collect();
            Tensor::new(&[m], out)?
        };
        let rg = self.rg(&[query.0, keys.0]);
        Ok(self.push(out, Op::CosineRows { query: query.0, keys: keys.0, eps }, rg))
    }

    /// Scalar cosine similarity of two equal-length vectors.
    pub fn cosine_similarity(&self, a: Var, b: Var, eps: f64) -> Result<Var, NumError> {
        let n = self.with_value(b, |t| t.len());
        let keys = self.reshape(b, &[1, n])?;
        self.cosine_rows(a, keys, eps)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if node.requires_grad {
                backprop_node(&nodes, idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape(), g).expect("grad shape matches value"))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

pub(crate) fn smooth_l1_elem(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[i].requires_grad {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]))
}

fn backprop_node(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(da) = buf(grads, nodes, *a) {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &tb.data()[p * n..(p + 1) * n];
                        da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(db) = buf(grads, nodes, *b) {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ta.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, k, stride } => {
            let (tx, tk) = (&nodes[*x].value, &nodes[*k].value);
            let (c_in, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let (c_out, kh, kw) = (tk.shape()[0], tk.shape()[2], tk.shape()[3]);
            let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
            let s = *stride;
            if let Some(dx) = buf(grads, nodes, *x) {
                for o in 0..c_out {
                    let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
                    for c in 0..c_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let wv = tk.data()[((o * c_in + c) * kh + ki) * kw + kj];
                                for oy in 0..ho {
                                    let base = c * h * w + (oy * s + ki) * w + kj;
                                    let grow = &gplane[oy * wo..(oy + 1) * wo];
                                    for (ox, gv) in grow.iter().enumerate() {
                                        dx[base + ox * s] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dk) = buf(grads, nodes, *k) {
                for o in 0..c_out {
                    let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
                    for c in 0..c_in {
                        let xplane = &tx.data()[c * h * w..(c + 1) * h * w];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let mut acc = 0.0;
                                for oy in 0..ho {
                                    let xrow = &xplane[(oy * s + ki) * w + kj..];
                                    let grow = &gplane[oy * wo..(oy + 1) * wo];
                                    for (ox, gv) in grow.iter().enumerate() {
                                        acc += gv * xrow[ox * s];
                                    }
                                }
                                dk[((o * c_in + c) * kh + ki) * kw + kj] += acc;
                            }
                        }
                    }
                }
            }
        }
        Op::AddBias { x, b, axis } => {
            if let Some(dx) = buf(grads, nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            if let Some(db) = buf(grads, nodes, *b) {
                let (outer, len, inner) = lanes(node.value.shape(), *axis);
                for o in 0..outer {
                    for (a, d) in db.iter_mut().enumerate().take(len) {
                        let base = (o * len + a) * inner;
                        *d += g[base..base + inner].iter().sum::<f64>();
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = buf(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            if let Some(db) = buf(grads, nodes, *b) {
                db.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = buf(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            if let Some(db) = buf(grads, nodes, *b) {
                db.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(da) = buf(grads, nodes, *a) {
                for i in 0..g.len() {
                    da[i] += g[i] * vb[i];
                }
            }
            if let Some(db) = buf(grads, nodes, *b) {
                for i in 0..g.len() {
                    db[i] += g[i] * va[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = buf(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
            }
        }
        Op::Relu(a) => {
            let va = nodes[*a].value.data();
            if let Some(da) = buf(grads, nodes, *a) {
                for i in 0..g.len() {
                    if va[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = lanes(node.value.shape(), *axis);
            if let Some(dx) = buf(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::L2Normalize { x, axis, eps, norms } => {
            let (outer, len, inner) = lanes(node.value.shape(), *axis);
            if let Some(dx) = buf(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let n = norms[o * inner + i];
                        if n > *eps {
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                dx[idx(j)] += (g[idx(j)] - y[idx(j)] * dot) / n;
                            }
                        } else {
                            for j in 0..len {
                                dx[idx(j)] += g[idx(j)] / eps;
                            }
                        }
                    }
                }
            }
        }
        Op::Norm { x, axis } => {
            let tx = &nodes[*x].value;
            let (outer, len, inner) = lanes(tx.shape(), *axis);
            if let Some(dx) = buf(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let n = y[o * inner + i];
                        if n == 0.0 {
                            continue;
                        }
                        let gn = g[o * inner + i];
                        for j in 0..len {
                            let k = (o * len + j) * inner + i;
                            dx[k] += gn * tx.data()[k] / n;
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = lanes(node.value.shape(), *axis);
            let mut offset = 0;
            let total = node.value.shape()[*axis] * inner;
            for &inp in inputs {
                let chunk = nodes[inp].value.shape()[*axis] * inner;
                if let Some(d) = buf(grads, nodes, inp) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        for (dv, gv) in d[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Op::Sum(a) => {
            if let Some(da) = buf(grads, nodes, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = lanes(nodes[*x].value.shape(), *axis);
            if let Some(dx) = buf(grads, nodes, *x) {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            dx[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = buf(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            if let Some(da) = buf(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::SmoothL1 { pred, target, beta } => {
            let (vp, vt) = (nodes[*pred].value.data(), nodes[*target].value.data());
            let n = vp.len() as f64;
            let deriv: Vec<f64> = vp
                .iter()
                .zip(vt)
                .map(|(p, t)| {
                    let x = p - t;
                    let d = if x.abs() < *beta { x / beta } else { x.signum() };
                    g[0] * d / n
                })
                .collect();
            if let Some(dp) = buf(grads, nodes, *pred) {
                dp.iter_mut().zip(&deriv).for_each(|(d, v)| *d += v);
            }
            if let Some(dt) = buf(grads, nodes, *target) {
                dt.iter_mut().zip(&deriv).for_each(|(d, v)| *d -= v);
            }
        }
        Op::CosineRows { query, keys, eps } => {
            let (tq, tk) = (&nodes[*query].value, &nodes[*keys].value);
            let (m, n) = (tk.shape()[0], tk.shape()[1]);
            let q = tq.data();
            let qn = tq.norm();
            let mut dq = vec![0.0; n];
            let mut dk = vec![0.0; m * n];
            for j in 0..m {
                let k = tk.row(j);
                let kn = k.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                let denom = qn * kn + eps;
                let gj = g[j];
                for t in 0..n {
                    let uq = if qn > 0.0 { q[t] / qn } else { 0.0 };
                    let uk = if kn > 0.0 { k[t] / kn } else { 0.0 };
                    dq[t] += gj * (k[t] / denom - dot * kn * uq / (denom * denom));
                    dk[j * n + t] += gj * (q[t] / denom - dot * qn * uk / (denom * denom));
                }
            }
            if let Some(d) = buf(grads, nodes, *query) {
                d.iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
            }
            if let Some(d) = buf(grads, nodes, *keys) {
                d.iter_mut().zip(&dk).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_vectors() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = tape.constant(t(&[2, 1], &[0.0, 1.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv_all_ones() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let out = tape.conv2d(x, k, 1).unwrap();
        assert_eq!(tape.shape(out), vec![1, 1, 1]);
        assert_eq!(tape.value(out).item(), 9.0);
    }

    #[test]
    fn conv_delta_kernel_crops_center() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let x = tape.constant(t(&[1, 5, 5], &data));
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = tape.constant(t(&[1, 1, 3, 3], &kd));
        let out = tape.value(tape.conv2d(x, k, 1).unwrap());
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert_eq!(out.data(), &[6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0]);
    }

    #[test]
    fn conv_output_extent_and_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 7, 9]));
        let k = tape.constant(Tensor::ones(&[4, 2, 3, 2]));
        assert_eq!(tape.shape(tape.conv2d(x, k, 2).unwrap()), vec![4, 3, 4]);
        let big = tape.constant(Tensor::ones(&[1, 2, 8, 8]));
        assert!(tape.conv2d(x, big, 1).is_err());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        let s = tape.value(tape.softmax(x, 0).unwrap());
        assert_eq!(s.data(), &[0.25; 4]);
    }

    #[test]
    fn invalid_axis_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.softmax(x, 1), Err(NumError::Axis(_))));
        assert!(tape.l2_normalize(x, 3, 1e-12).is_err());
        assert!(tape.concat(&[x, x], 2).is_err());
    }

    #[test]
    fn smooth_l1_closed_forms() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(&[1.0, -2.0]));
        let same = tape.value(tape.smooth_l1(p, p, 1.0).unwrap()).item();
        assert_eq!(same, 0.0);
        let a = tape.constant(Tensor::vector(&[2.0]));
        let z = tape.constant(Tensor::vector(&[0.0]));
        assert_eq!(tape.value(tape.smooth_l1(a, z, 1.0).unwrap()).item(), 1.5);
        let h = tape.constant(Tensor::vector(&[0.5]));
        assert_eq!(tape.value(tape.smooth_l1(h, z, 1.0).unwrap()).item(), 0.125);
    }

    #[test]
    fn cosine_cases() {
        let tape = Tape::new();
        let cos = |a: &[f64], b: &[f64]| {
            let a = tape.constant(Tensor::vector(a));
            let b = tape.constant(Tensor::vector(b));
            tape.value(tape.cosine_similarity(a, b, crate::numcore::EPS).unwrap()).item()
        };
        assert!((cos(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cos(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cos(&[1.0, -2.0], &[-1.0, 2.0]) + 1.0).abs() < 1e-12);
        assert_eq!(cos(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn sum_gives_ones_and_zero_scale_gives_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, -3.0, 2.0]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, -3.0, 2.0]));
        let loss = tape.sum(tape.scale(x, 0.0));
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(NumError::Contract(_))));
    }

    #[test]
    fn reused_input_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(&[3.0]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        assert_eq!(tape.backward(loss).unwrap().get(x).item(), 6.0);
    }

    #[test]
    fn backward_is_repeatable() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(&[0.3, -1.2, 2.0]));
        let s = tape.softmax(x, 0).unwrap();
        let n = tape.l2_normalize(s, 0, 1e-12).unwrap();
        let w = tape.constant(Tensor::vector(&[1.0, 2.0, -1.0]));
        let loss = tape.sum(tape.mul(n, w).unwrap());
        let g1 = tape.backward(loss).unwrap().get(x);
        let g2 = tape.backward(loss).unwrap().get(x);
        assert_eq!(g1, g2);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let p = tape.param(Tensor::vector(&[1.0, 1.0]));
        let loss = tape.sum(tape.mul(c, p).unwrap());
        let g = tape.backward(loss).unwrap();
        assert!(g.get_ref(c).is_none());
        assert_eq!(g.get(p).data(), &[1.0, 2.0]);
    }
}
