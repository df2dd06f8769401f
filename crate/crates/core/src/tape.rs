//! Reverse-mode gradient recording.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append a node holding the output value and a backward rule, and return a
//! [`Var`] handle to it. [`Tape::backward`] replays the nodes in reverse order
//! and leaves a gradient on every node that requires one.
//!
//! ```
//! use labelemb::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap().with_grad());
//! let y = tape.sum(x);
//! let z = tape.add(y, y).unwrap();
//! tape.backward(z).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
//! ```

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    StopGradient,
    Matmul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Relu { x: Var },
    Reshape { x: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Softmax { x: Var, tau: T },
    CrossEntropy { logits: Var, target: Vec<T>, probs: Vec<T> },
    GatherRows { src: Var, rows: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    Hinge { x: Var, alpha: T, order: u8 },
    WeightedSum { x: Var, weights: Vec<T> },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of the operations of one forward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_row<T: Scalar>(x: &[T], tau: T, out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - max) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let mut value = value;
        value.clear_grad();
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. It takes part in gradient computation when the
    /// tensor is marked `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, rg, Op::Leaf)
    }

    /// Records a copy of `t` as a leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let copy = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape already valid");
        self.push(copy, rg, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Gradient left on `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul of {:?} and {:?}",
                sa, sb
            )));
        }
        let (n, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * p];
        gemm(n, k, p, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, T::zero(), &mut out);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new([n, p], out)?, rg, Op::Matmul { a, b }))
    }

    /// Adds `bias` (length = last axis of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.shape().len() != 1 || bv.len() != xv.cols() {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match last axis of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(t, rg, Op::AddBias { x, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(t, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.needs(x);
        self.push(t, rg, Op::Scale { x, factor })
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.needs(x);
        self.push(t, rg, Op::Relu { x })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().to_vec())?.reshape(shape)?;
        let rg = self.needs(x);
        Ok(self.push(t, rg, Op::Reshape { x }))
    }

    /// Identity forward; nothing flows back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, false, Op::StopGradient)
    }

    /// Same-size 2-D cross-correlation plus per-filter bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let geom = ConvGeometry::infer(self.value(x).shape(), self.value(w).shape(), self.value(b).shape())?;
        let out = conv::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let t = Tensor::new(geom.output_shape(), out)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(t, rg, Op::Conv2d { x, w, b, geom }))
    }

    /// 2×2 max pooling with stride 2.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (shape, out, argmax) = conv::maxpool2d_forward(self.value(x).shape(), self.value(x).data())?;
        let t = Tensor::new(shape, out)?;
        let rg = self.needs(x);
        Ok(self.push(t, rg, Op::MaxPool2d { x, argmax }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, T::one())
    }

    /// Softmax of `x / tau` over the last axis.
    pub fn softmax_temperature(&mut self, x: Var, tau: T) -> Result<Var> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(Error::Parameter(format!("temperature must be positive, got {}", tau)));
        }
        Ok(self.softmax_impl(x, tau))
    }

    fn softmax_impl(&mut self, x: Var, tau: T) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = vec![T::zero(); xv.len()];
        for (src, dst) in xv.data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(src, tau, dst);
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.needs(x);
        self.push(t, rg, Op::Softmax { x, tau })
    }

    /// Row-wise cross entropy `-Σ target_i · log softmax(logits)_i`.
    ///
    /// `target` is read as a constant: no gradient flows into it. Each row
    /// of the target must be a probability distribution. A single vector
    /// yields a scalar; an `n×m` matrix yields a vector of `n` losses.
    pub fn cross_entropy(&mut self, target: Var, logits: Var) -> Result<Var> {
        let (tv, lv) = (self.value(target), self.value(logits));
        if tv.shape() != lv.shape() || lv.shape().is_empty() || lv.shape().len() > 2 {
            return Err(Error::Dimension(format!(
                "cross_entropy target {:?} vs logits {:?}",
                tv.shape(),
                lv.shape()
            )));
        }
        let cols = lv.cols();
        for (r, row) in tv.data().chunks(cols).enumerate() {
            let total: f64 = row.iter().map(|v| v.as_f64()).sum();
            let tol = T::DIST_TOLERANCE + cols as f64 * T::epsilon().as_f64();
            if row.iter().any(|v| !(*v >= T::zero())) || (total - 1.0).abs() > tol {
                return Err(Error::Validation(format!(
                    "cross_entropy target row {} is not a distribution (sum {})",
                    r, total
                )));
            }
        }
        let mut losses = Vec::with_capacity(lv.rows());
        let mut probs = vec![T::zero(); lv.len()];
        for ((z, t), p) in lv.data().chunks(cols).zip(tv.data().chunks(cols)).zip(probs.chunks_mut(cols)) {
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            let mut loss = T::zero();
            for ((&zi, &ti), pi) in z.iter().zip(t).zip(p.iter_mut()) {
                *pi = (zi - lse).exp();
                if ti > T::zero() {
                    loss -= ti * (zi - lse);
                }
            }
            losses.push(loss);
        }
        let shape: Vec<usize> = if lv.shape().len() == 1 { vec![] } else { vec![lv.rows()] };
        let target_copy = tv.data().to_vec();
        let t = Tensor::new(shape, losses)?;
        let rg = self.needs(logits);
        Ok(self.push(t, rg, Op::CrossEntropy { logits, target: target_copy, probs }))
    }

    /// Gathers `rows` of a matrix into a new `rows.len() × cols` matrix.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        if sv.shape().len() != 2 {
            return Err(Error::Dimension(format!("gather_rows on {:?}", sv.shape())));
        }
        let (n, cols) = (sv.shape()[0], sv.shape()[1]);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { index: r, len: n });
            }
            out.extend_from_slice(sv.row(r));
        }
        let t = Tensor::new([rows.len(), cols], out)?;
        let rg = self.needs(src);
        Ok(self.push(t, rg, Op::GatherRows { src, rows: rows.to_vec() }))
    }

    /// Picks `x[i, cols[i]]` from every row of a matrix.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.shape()[0] != cols.len() {
            return Err(Error::Dimension(format!(
                "pick of {} columns from {:?}",
                cols.len(),
                xv.shape()
            )));
        }
        let m = xv.shape()[1];
        let mut out = Vec::with_capacity(cols.len());
        for (i, &c) in cols.iter().enumerate() {
            if c >= m {
                return Err(Error::Index { index: c, len: m });
            }
            out.push(xv.data()[i * m + c]);
        }
        let t = Tensor::new([cols.len()], out)?;
        let rg = self.needs(x);
        Ok(self.push(t, rg, Op::Pick { x, cols: cols.to_vec() }))
    }

    /// Elementwise `max(0, x - alpha)^order` for `order` 1 or 2.
    pub fn hinge(&mut self, x: Var, alpha: T, order: u8) -> Result<Var> {
        if order != 1 && order != 2 {
            return Err(Error::Parameter(format!("hinge order must be 1 or 2, got {}", order)));
        }
        let xv = self.value(x);
        let out = xv
            .data()
            .iter()
            .map(|&v| {
                let d = (v - alpha).max(T::zero());
                if order == 1 {
                    d
                } else {
                    d * d
                }
            })
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(x);
        Ok(self.push(t, rg, Op::Hinge { x, alpha, order }))
    }

    /// `Σ weights_i · x_i`, a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} weights for tensor of shape {:?}",
                weights.len(),
                xv.shape()
            )));
        }
        let total = xv.data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        let rg = self.needs(x);
        Ok(self.push(Tensor::scalar(total), rg, Op::WeightedSum { x, weights: weights.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(total), rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let w = vec![T::one() / T::from_f64(n as f64); n];
        self.weighted_sum(x, &w).expect("weights match")
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    ///
    /// Gradients from an earlier call are discarded first. Multiple uses of
    /// a node add their contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.apply_rule(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Runs `f` on the gradient buffer of `v` when `v` takes gradients.
    fn sink(&mut self, v: Var, f: impl FnOnce(&mut [T], &Tensor<T>, &[Node<T>])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf, &self.nodes[v.0].value, &self.nodes);
    }

    fn apply_rule(&mut self, i: usize, g: &[T]) {
        // Ops are moved out so that input nodes can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out_shape = self.nodes[i].value.shape().to_vec();
        match &op {
            Op::Leaf | Op::StopGradient => {}
            Op::Matmul { a, b } => {
                let (n, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let p = self.value(*b).shape()[1];
                let (a, b) = (*a, *b);
                self.sink(a, |ga, _, nodes| {
                    gemm(n, p, k, g, Layout::Normal, nodes[b.0].value.data(), Layout::Transposed, T::one(), ga)
                });
                self.sink(b, |gb, _, nodes| {
                    gemm(k, n, p, nodes[a.0].value.data(), Layout::Transposed, g, Layout::Normal, T::one(), gb)
                });
            }
            Op::AddBias { x, bias } => {
                self.sink(*x, |gx, _, _| add_into(gx, g));
                let cols = *out_shape.last().unwrap_or(&1);
                self.sink(*bias, |gb, _, _| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add { a, b } => {
                self.sink(*a, |ga, _, _| add_into(ga, g));
                self.sink(*b, |gb, _, _| add_into(gb, g));
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.sink(*x, |gx, _, _| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v * f;
                    }
                });
            }
            Op::Relu { x } => {
                self.sink(*x, |gx, xv, _| {
                    for ((o, &v), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                        if xi > T::zero() {
                            *o += v;
                        }
                    }
                });
            }
            Op::Reshape { x } => self.sink(*x, |gx, _, _| add_into(gx, g)),
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let mut take = |v: Var| {
                    self.needs(v).then(|| {
                        let n = self.nodes[v.0].value.len();
                        self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n])
                    })
                };
                let (mut gx, mut gw, mut gb) = (take(x), take(w), take(b));
                conv::conv2d_backward(
                    geom,
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, buf) in [(x, gx), (w, gw), (b, gb)] {
                    if buf.is_some() {
                        self.grads[v.0] = buf;
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                self.sink(*x, |gx, _, _| {
                    for (&idx, &v) in argmax.iter().zip(g) {
                        gx[idx] += v;
                    }
                });
            }
            Op::Softmax { x, tau } => {
                let s = self.nodes[i].value.data().to_vec();
                let cols = *out_shape.last().unwrap_or(&1);
                let tau = *tau;
                self.sink(*x, |gx, _, _| {
                    for ((go, si), gi) in g.chunks(cols).zip(s.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: T = go.iter().zip(si).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &sv) in gi.iter_mut().zip(go).zip(si) {
                            *o += sv * (gv - dot) / tau;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, target, probs } => {
                let cols = self.value(*logits).cols();
                self.sink(*logits, |gl, _, _| {
                    for (((&gr, t), p), o) in g.iter().zip(target.chunks(cols)).zip(probs.chunks(cols)).zip(gl.chunks_mut(cols)) {
                        let mass: T = t.iter().copied().sum();
                        for ((oi, &ti), &pi) in o.iter_mut().zip(t).zip(p) {
                            *oi += gr * (mass * pi - ti);
                        }
                    }
                });
            }
            Op::GatherRows { src, rows } => {
                let cols = *out_shape.last().unwrap_or(&1);
                self.sink(*src, |gs, _, _| {
                    for (&r, go) in rows.iter().zip(g.chunks(cols)) {
                        add_into(&mut gs[r * cols..(r + 1) * cols], go);
                    }
                });
            }
            Op::Pick { x, cols } => {
                let m = self.value(*x).cols();
                self.sink(*x, |gx, _, _| {
                    for (r, (&c, &v)) in cols.iter().zip(g).enumerate() {
                        gx[r * m + c] += v;
                    }
                });
            }
            Op::Hinge { x, alpha, order } => {
                let (alpha, order) = (*alpha, *order);
                self.sink(*x, |gx, xv, _| {
                    for ((o, &v), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                        if xi > alpha {
                            *o += if order == 1 { v } else { v * (xi - alpha) * T::from_f64(2.0) };
                        }
                    }
                });
            }
            Op::WeightedSum { x, weights } => {
                let g0 = g[0];
                self.sink(*x, |gx, _, _| {
                    for (o, &w) in gx.iter_mut().zip(weights) {
                        *o += g0 * w;
                    }
                });
            }
            Op::Sum { x } => {
                let g0 = g[0];
                self.sink(*x, |gx, _, _| gx.iter_mut().for_each(|o| *o += g0));
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
