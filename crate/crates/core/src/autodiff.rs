//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! A [`Graph`] records every operation in execution order, so node indices
//! are already a topological order and the backward sweep simply walks them
//! in reverse. Each node keeps its output and whatever the vector-Jacobian
//! product needs.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::conv::{self, ConvSpec, Geometry};
use crate::error::{shape_err, Error, Result};
use crate::optim::{ParamId, Parameter};
use crate::tensor::{inverse_permutation, numel, strides_of, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the batch statistics.
    Train,
    /// Normalize with externally supplied (running) statistics.
    Eval,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Reshape,
    Permute(Vec<usize>),
    MeanAxis { axis: usize },
    Sigmoid,
    Relu,
    Conv { spec: ConvSpec, has_bias: bool },
    Linear { has_bias: bool },
    MaskResidual,
    Add,
    Sub,
    Mul,
    Scale(S),
    Narrow { axis: usize, start: usize },
    PadAxis { axis: usize, before: usize },
    Shift { fold: usize },
    BatchNorm { xhat: Tensor<S>, inv_std: Vec<S>, mode: NormMode },
    SoftmaxXent { probs: Tensor<S>, labels: Vec<usize> },
    SumAll,
}

#[derive(Debug)]
struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    grads: RefCell<Vec<Option<Tensor<S>>>>,
    bound: RefCell<HashMap<ParamId, Var>>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Moves a fraction of channels one step along the segment axis of an
/// (N, T, C, ...) buffer. Channels `[0, fold)` move by `dir`, channels
/// `[fold, 2*fold)` by `-dir`; vacated slots are zero.
fn shift_channels<S: Scalar>(x: &[S], shape: &[usize], fold: usize, dir: isize) -> Vec<S> {
    let (n, t, c) = (shape[0], shape[1], shape[2]);
    let inner: usize = shape[3..].iter().product();
    let mut out = vec![S::zero(); x.len()];
    for ni in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                let delta = if ci < fold {
                    dir
                } else if ci < 2 * fold {
                    -dir
                } else {
                    0
                };
                let src_t = ti as isize - delta;
                if src_t < 0 || src_t >= t as isize {
                    continue;
                }
                let dst = ((ni * t + ti) * c + ci) * inner;
                let src = ((ni * t + src_t as usize) * c + ci) * inner;
                out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
            }
        }
    }
    out
}

/// Maps every element of `full` to its element in a singleton-broadcast
/// tensor of shape `small`.
fn broadcast_offsets(full: &[usize], small: &[usize]) -> Vec<usize> {
    let sstr = strides_of(small);
    let eff: Vec<usize> = small.iter().zip(&sstr).map(|(&e, &s)| if e == 1 { 0 } else { s }).collect();
    let total = numel(full);
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; full.len()];
    let mut off = 0usize;
    for _ in 0..total {
        offs.push(off);
        for ax in (0..full.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < full[ax] {
                break;
            }
            off -= eff[ax] * full[ax];
            idx[ax] = 0;
        }
    }
    offs
}

fn check_broadcast(x: &[usize], m: &[usize]) -> Result<()> {
    if x.len() != m.len() || x.iter().zip(m).any(|(&a, &b)| b != a && b != 1) {
        return Err(shape_err!("mask {:?} does not broadcast to {:?}", m, x));
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()), bound: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, inputs: Vec<Var>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node { value: Rc::new(value), op, inputs, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn input(&self, value: Tensor<S>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, inputs: Vec::new(), requires_grad: true });
        Var(nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, inputs: Vec::new(), requires_grad: false });
        Var(nodes.len() - 1)
    }

    /// Binds a parameter as a gradient leaf; repeated calls in one pass
    /// return the same node.
    pub fn param(&self, p: &Parameter<S>) -> Var {
        if let Some(&v) = self.bound.borrow().get(&p.id()) {
            return v;
        }
        let v = self.input(p.value.clone());
        self.bound.borrow_mut().insert(p.id(), v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    // ---- operations -------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape, vec![x]))
    }

    pub fn permute(&self, x: Var, order: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(order)?;
        Ok(self.push(out, Op::Permute(order.to_vec()), vec![x]))
    }

    pub fn mean_axis(&self, x: Var, axis: usize, keep: bool) -> Result<Var> {
        let out = self.value(x).mean_axis(axis, keep)?;
        Ok(self.push(out, Op::MeanAxis { axis }, vec![x]))
    }

    /// Permutation-exact mean along `axis`; see [`Tensor::mean_axis_sorted`].
    pub fn mean_axis_sorted(&self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).mean_axis_sorted(axis)?;
        Ok(self.push(out, Op::MeanAxis { axis }, vec![x]))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| S::one() / (S::one() + (-v).exp()));
        self.push(out, Op::Sigmoid, vec![x])
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(S::zero()));
        self.push(out, Op::Relu, vec![x])
    }

    pub fn conv(&self, x: Var, kernel: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let g = Geometry::new(xv.shape(), kv.shape(), spec)?;
        let bv = bias.map(|b| self.value(b));
        if let Some(b) = &bv {
            if b.len() != kv.shape()[0] {
                return Err(shape_err!("bias has {} entries for {} output channels", b.len(), kv.shape()[0]));
            }
        }
        let data = conv::forward(xv.data(), kv.data(), bv.as_ref().map(|b| b.data()), &g);
        let out = Tensor::new(&g.out_shape(spec.rank), data)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv { spec: *spec, has_bias: bias.is_some() }, inputs))
    }

    /// Affine map over the last axis: `y = x W^T + b`, `W` is (out, in).
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(weight);
        let ws = wv.shape();
        let xs = xv.shape();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
            return Err(shape_err!("linear: input {:?} incompatible with weight {:?}", xs, ws));
        }
        let (fin, fout) = (ws[1], ws[0]);
        let rows = xv.len() / fin;
        let bv = bias.map(|b| self.value(b));
        if let Some(b) = &bv {
            if b.len() != fout {
                return Err(shape_err!("linear: bias has {} entries, expected {}", b.len(), fout));
            }
        }
        let mut out = vec![S::zero(); rows * fout];
        for r in 0..rows {
            let xr = &xv.data()[r * fin..(r + 1) * fin];
            for o in 0..fout {
                let wr = &wv.data()[o * fin..(o + 1) * fin];
                let mut acc = bv.as_ref().map_or(S::zero(), |b| b.data()[o]);
                for (a, b) in xr.iter().zip(wr) {
                    acc += *a * *b;
                }
                out[r * fout + o] = acc;
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = fout;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { has_bias: bias.is_some() }, inputs))
    }

    /// `x + x * m` with `m` broadcast along its singleton axes.
    pub fn mask_residual(&self, x: Var, m: Var) -> Result<Var> {
        let xv = self.value(x);
        let mv = self.value(m);
        check_broadcast(xv.shape(), mv.shape())?;
        let offs = broadcast_offsets(xv.shape(), mv.shape());
        let md = mv.data();
        let data = xv.data().iter().zip(&offs).map(|(&a, &o)| a + a * md[o]).collect();
        Ok(self.push(Tensor::new(xv.shape(), data)?, Op::MaskResidual, vec![x, m]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add, vec![a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub, vec![a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul, vec![a, b]))
    }

    pub fn scale(&self, x: Var, k: S) -> Var {
        let out = self.value(x).scale(k);
        self.push(out, Op::Scale(k), vec![x])
    }

    /// Slices `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!("narrow({}, {}, {}) out of range for {:?}", axis, start, len, shape));
        }
        let (outer, n, inner) = axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Narrow { axis, start }, vec![x]))
    }

    /// Zero-pads `before`/`after` slices along `axis`.
    pub fn pad_axis(&self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(shape_err!("pad axis {} out of range for {:?}", axis, shape));
        }
        let (outer, n, inner) = axis_split(shape, axis);
        let m = n + before + after;
        let mut data = vec![S::zero(); outer * m * inner];
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            data[dst..dst + n * inner].copy_from_slice(&xv.data()[o * n * inner..(o + 1) * n * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = m;
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::PadAxis { axis, before }, vec![x]))
    }

    /// Temporal shift on an (N, T, C, ...) tensor: the first `fold` channels
    /// move forward in time, the next `fold` backward.
    pub fn temporal_shift(&self, x: Var, fold: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() < 3 || 2 * fold > shape[2] {
            return Err(shape_err!("temporal shift of {} channels invalid for {:?}", 2 * fold, shape));
        }
        let out = shift_channels(xv.data(), shape, fold, 1);
        Ok(self.push(Tensor::new(shape, out)?, Op::Shift { fold }, vec![x]))
    }

    /// Batch normalization over axis 1 of a (B, C, ...) tensor. In training
    /// mode the batch statistics are returned so callers can maintain running
    /// averages; in eval mode `stats` must hold the statistics to use.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        stats: Option<&BatchStats>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() < 2 {
            return Err(shape_err!("batch norm needs (B, C, ...), got {:?}", shape));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.len() != c || bv.len() != c {
            return Err(shape_err!("batch norm affine params must have {} entries", c));
        }
        let count = (b * inner) as f64;
        let (mean, var, produced) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * inner;
                        s += xv.data()[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = s / count;
                    let mut q = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * inner;
                        q += xv.data()[base..base + inner].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                    }
                    mean[ci] = mu;
                    var[ci] = q / count;
                }
                let st = BatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(st))
            }
            NormMode::Eval => {
                let st = stats.ok_or_else(|| Error::Config("eval batch norm without statistics".into()))?;
                if st.mean.len() != c || st.var.len() != c {
                    return Err(shape_err!("running statistics must have {} entries", c));
                }
                (st.mean.clone(), st.var.clone(), None)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::of(1.0 / (v + eps).sqrt())).collect();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                let (mu, is) = (S::of(mean[ci]), inv_std[ci]);
                let (gm, bt) = (gv.data()[ci], bv.data()[ci]);
                for k in base..base + inner {
                    let h = (xv.data()[k] - mu) * is;
                    xhat[k] = h;
                    out[k] = gm * h + bt;
                }
            }
        }
        let op = Op::BatchNorm { xhat: Tensor::new(shape, xhat)?, inv_std, mode };
        Ok((self.push(Tensor::new(shape, out)?, op, vec![x, gamma, beta]), produced))
    }

    /// Mean cross-entropy of row-wise softmax against class labels.
    pub fn softmax_xent(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let shape = lv.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err!("logits {:?} do not match {} labels", shape, labels.len()));
        }
        let (b, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {} out of range for {} classes", bad, k)));
        }
        let mut probs = vec![S::zero(); b * k];
        let mut loss = 0.0f64;
        for r in 0..b {
            let row = &lv.data()[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= z;
            }
            loss += (z.ln() + mx - row[labels[r]]).as_f64();
        }
        let out = Tensor::scalar(S::of(loss / b as f64));
        let op = Op::SoftmaxXent { probs: Tensor::new(shape, probs)?, labels: labels.to_vec() };
        Ok(self.push(out, op, vec![logits]))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll, vec![x])
    }

    // ---- backward ---------------------------------------------------

    /// Back-propagates from a single-element node, seeding its gradient
    /// with one.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(shape_err!("backward from non-scalar of shape {:?}", nodes[loss.0].value.shape()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let parts = self.vjp(node, &gy, &nodes)?;
            for (inp, g) in node.inputs.iter().zip(parts) {
                if let Some(g) = g {
                    if !nodes[inp.0].requires_grad {
                        continue;
                    }
                    match &mut grads[inp.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        // interior gradients were consumed; leaves keep theirs
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.grads.borrow().get(v.0).cloned().flatten()
    }

    /// Adds this pass's gradient into `p.grad` if `p` was bound.
    pub fn accumulate(&self, p: &mut Parameter<S>) {
        let bound = self.bound.borrow().get(&p.id()).copied();
        if let Some(g) = bound.and_then(|v| self.grad(v)) {
            p.grad.add_assign(&g);
        }
    }

    fn vjp(&self, node: &Node<S>, gy: &Tensor<S>, nodes: &[Node<S>]) -> Result<Vec<Option<Tensor<S>>>> {
        let val = |v: &Var| -> &Tensor<S> { &nodes[v.0].value };
        let x0 = val(&node.inputs[0]);
        let out: Vec<Option<Tensor<S>>> = match &node.op {
            Op::Leaf => vec![],
            Op::Reshape => vec![Some(gy.clone().into_reshaped(x0.shape()))],
            Op::Permute(order) => vec![Some(gy.permute(&inverse_permutation(order))?)],
            Op::MeanAxis { axis } => {
                let (outer, n, inner) = axis_split(x0.shape(), *axis);
                let scale = S::one() / S::of(n as f64);
                let mut g = vec![S::zero(); x0.len()];
                for o in 0..outer {
                    let src = &gy.data()[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for (d, &s) in g[base..base + inner].iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                vec![Some(Tensor::new(x0.shape(), g)?)]
            }
            Op::Sigmoid => {
                let y = &node.value;
                vec![Some(gy.zip_map(y, |g, s| g * s * (S::one() - s))?)]
            }
            Op::Relu => vec![Some(gy.zip_map(x0, |g, x| if x > S::zero() { g } else { S::zero() })?)],
            Op::Conv { spec, has_bias } => {
                let w = val(&node.inputs[1]);
                let geo = Geometry::new(x0.shape(), w.shape(), spec)?;
                let dx = if nodes[node.inputs[0].0].requires_grad {
                    Some(Tensor::new(x0.shape(), conv::backward_input(gy.data(), w.data(), &geo))?)
                } else {
                    None
                };
                let dw = Tensor::new(w.shape(), conv::backward_kernel(gy.data(), x0.data(), &geo))?;
                let mut v = vec![dx, Some(dw)];
                if *has_bias {
                    let b = val(&node.inputs[2]);
                    v.push(Some(Tensor::new(b.shape(), conv::backward_bias(gy.data(), &geo))?));
                }
                v
            }
            Op::Linear { has_bias } => {
                let w = val(&node.inputs[1]);
                let (fout, fin) = (w.shape()[0], w.shape()[1]);
                let rows = x0.len() / fin;
                let mut dx = vec![S::zero(); x0.len()];
                let mut dw = vec![S::zero(); w.len()];
                let mut db = vec![S::zero(); fout];
                for r in 0..rows {
                    let xr = &x0.data()[r * fin..(r + 1) * fin];
                    let gr = &gy.data()[r * fout..(r + 1) * fout];
                    let dxr = &mut dx[r * fin..(r + 1) * fin];
                    for o in 0..fout {
                        let go = gr[o];
                        db[o] += go;
                        let wr = &w.data()[o * fin..(o + 1) * fin];
                        let dwr = &mut dw[o * fin..(o + 1) * fin];
                        for i in 0..fin {
                            dxr[i] += go * wr[i];
                            dwr[i] += go * xr[i];
                        }
                    }
                }
                let mut v = vec![Some(Tensor::new(x0.shape(), dx)?), Some(Tensor::new(w.shape(), dw)?)];
                if *has_bias {
                    v.push(Some(Tensor::new(&[fout], db)?));
                }
                v
            }
            Op::MaskResidual => {
                let m = val(&node.inputs[1]);
                let offs = broadcast_offsets(x0.shape(), m.shape());
                let md = m.data();
                let mut dx = vec![S::zero(); x0.len()];
                let mut dm = vec![S::zero(); m.len()];
                for (k, &o) in offs.iter().enumerate() {
                    let g = gy.data()[k];
                    dx[k] = g * (S::one() + md[o]);
                    dm[o] += g * x0.data()[k];
                }
                vec![Some(Tensor::new(x0.shape(), dx)?), Some(Tensor::new(m.shape(), dm)?)]
            }
            Op::Add => vec![Some(gy.clone()), Some(gy.clone())],
            Op::Sub => vec![Some(gy.clone()), Some(gy.scale(-S::one()))],
            Op::Mul => {
                let x1 = val(&node.inputs[1]);
                vec![Some(gy.zip_map(x1, |g, b| g * b)?), Some(gy.zip_map(x0, |g, a| g * a)?)]
            }
            Op::Scale(k) => vec![Some(gy.scale(*k))],
            Op::Narrow { axis, start } => {
                let (outer, n, inner) = axis_split(x0.shape(), *axis);
                let len = gy.shape()[*axis];
                let mut g = vec![S::zero(); x0.len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(x0.shape(), g)?)]
            }
            Op::PadAxis { axis, before } => {
                let (outer, n, inner) = axis_split(x0.shape(), *axis);
                let m = gy.shape()[*axis];
                let mut g = Vec::with_capacity(x0.len());
                for o in 0..outer {
                    let src = (o * m + before) * inner;
                    g.extend_from_slice(&gy.data()[src..src + n * inner]);
                }
                vec![Some(Tensor::new(x0.shape(), g)?)]
            }
            Op::Shift { fold } => {
                vec![Some(Tensor::new(x0.shape(), shift_channels(gy.data(), x0.shape(), *fold, -1))?)]
            }
            Op::BatchNorm { xhat, inv_std, mode } => {
                let gamma = val(&node.inputs[1]);
                let shape = x0.shape();
                let (b, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        for k in base..base + inner {
                            dgamma[ci] += gy.data()[k] * xhat.data()[k];
                            dbeta[ci] += gy.data()[k];
                        }
                    }
                }
                let count = S::of((b * inner) as f64);
                let mut dx = vec![S::zero(); x0.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        let k0 = gamma.data()[ci] * inv_std[ci];
                        let span = base..base + inner;
                        for ((d, &g), &xh) in dx[span.clone()].iter_mut().zip(&gy.data()[span.clone()]).zip(&xhat.data()[span]) {
                            *d = match mode {
                                NormMode::Eval => k0 * g,
                                NormMode::Train => k0 * (g - dbeta[ci] / count - xh * dgamma[ci] / count),
                            };
                        }
                    }
                }
                vec![Some(Tensor::new(shape, dx)?), Some(Tensor::new(&[c], dgamma)?), Some(Tensor::new(&[c], dbeta)?)]
            }
            Op::SoftmaxXent { probs, labels } => {
                let (b, k) = (probs.shape()[0], probs.shape()[1]);
                let scale = gy.item() / S::of(b as f64);
                let mut g = probs.data().to_vec();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * k + l] -= S::one();
                }
                g.iter_mut().for_each(|v| *v *= scale);
                vec![Some(Tensor::new(probs.shape(), g)?)]
            }
            Op::SumAll => vec![Some(Tensor::full(x0.shape(), gy.item()))],
        };
        Ok(out)
    }
}
