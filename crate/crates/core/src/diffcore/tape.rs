//! Reverse-mode tape over `f64` tensors.
//!
//! Every operation evaluates eagerly and records its inputs. A node requires
//! a gradient when any of its inputs does; [`Tape::stop_grad`] produces a node
//! that never does, so nothing upstream of it can receive a gradient through
//! that path.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<f64>, rstds: Vec<f64> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    CausalAttention { qkv: Var, heads: usize, probs: Vec<f64> },
    NegL2 { a: Var, b: Var },
    CrossEntropy { logits: Var, probs: Vec<f64>, target: usize, epsilon: f64 },
    Mse(Var, Var),
    SliceRows { x: Var, start: usize },
    StopGrad(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, with unreached nodes reported as exact zeros.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Recorded inputs of `v`, including the one behind a stop-gradient.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Add(a, b) | Op::Mul(a, b) | Op::Mse(a, b) | Op::NegL2 { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(x, _) | Op::Sum(x) | Op::Mean(x) | Op::Gelu(x) | Op::StopGrad(x) => vec![*x],
            Op::Softmax { x, .. } | Op::SliceRows { x, .. } => vec![*x],
            Op::CausalAttention { qkv, .. } => vec![*qkv],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn is_stop_grad(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::StopGrad(_))
    }

    /// Records a leaf; it takes part in differentiation when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        let mut value = t.clone();
        value.clear_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Records a trainable leaf regardless of the tensor's own flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone().with_requires_grad(true);
        value.clear_grad();
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.shape().is_empty() || xv.cols() != wv.shape()[0] {
            return Err(Error::dim("linear", xv.shape(), wv.shape()));
        }
        let (k, n) = (wv.shape()[0], wv.shape()[1]);
        let m = xv.len() / k;
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [n] {
                    return Err(Error::dim("linear bias", wv.shape(), bv.shape()));
                }
                Some(bv.data())
            }
            None => None,
        };
        let out = kernels::linear(xv.data(), m, k, wv.data(), n, bias);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(xv.shape(), data).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(xv.shape(), data).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Layer normalisation over the last axis with learned affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let (out, means, rstds) = kernels::layer_norm(xv.data(), d, gv.data(), bv.data());
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, means, rstds }, rg))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Index { what: "softmax axis", index: axis, len: shape.len() });
        }
        if !xv.all_finite() {
            return Err(Error::Numeric("softmax received a non-finite input".into()));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = xv.data().to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = out[at(j)];
                }
                kernels::softmax_in_place(&mut buf);
                for (j, &b) in buf.iter().enumerate() {
                    out[at(j)] = b;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Causal multi-head attention core over packed queries, keys and values
    /// `qkv[T, 3D]`, producing `[T, D]`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let v = self.value(qkv);
        if v.shape().len() != 2 || v.cols() % 3 != 0 {
            return Err(Error::dim("causal_attention", v.shape(), &[0, 3]));
        }
        let (t, d) = (v.shape()[0], v.cols() / 3);
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} is not divisible by {heads} heads")));
        }
        let (out, probs) = kernels::causal_attention(v.data(), t, d, heads);
        let rg = self.rg(qkv);
        Ok(self.push(Tensor::new(&[t, d], out)?, Op::CausalAttention { qkv, heads, probs }, rg))
    }

    /// Negative Euclidean distance between every row of `a[.., D]` and every
    /// row of `b[K, D]`.
    pub fn neg_l2_scores(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() || av.cols() != bv.cols() {
            return Err(Error::dim("neg_l2_scores", av.shape(), bv.shape()));
        }
        let (k, d) = (bv.shape()[0], bv.cols());
        let m = av.len() / d.max(1);
        let out = kernels::neg_l2(av.data(), m, bv.data(), k, d);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::NegL2 { a, b }, rg))
    }

    /// Label-smoothed cross-entropy of every row of `logits[.., K]` against
    /// `target`, averaged over rows. The target distribution is
    /// `(1 - epsilon) * onehot + epsilon / K`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize, epsilon: f64) -> Result<Var> {
        let lv = self.value(logits);
        let k = lv.cols();
        if lv.shape().is_empty() || k == 0 {
            return Err(Error::dim("cross_entropy", lv.shape(), &[1]));
        }
        if target >= k {
            return Err(Error::Index { what: "class", index: target, len: k });
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::config(format!("label smoothing {epsilon} outside [0, 1)")));
        }
        let rows = lv.len() / k;
        let off = epsilon / k as f64;
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0;
        for r in 0..rows {
            let row = lv.row(r);
            let lse = kernels::log_sum_exp(row);
            let mut loss = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let q = if j == target { 1.0 - epsilon + off } else { off };
                let logp = x - lse;
                if q != 0.0 {
                    loss -= q * logp;
                }
                probs.push(logp.exp());
            }
            total += loss;
        }
        let value = Tensor::scalar(total / rows as f64);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, probs, target, epsilon }, rg))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mse", av, bv)?;
        let n = av.len().max(1) as f64;
        let s = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::dim("slice_rows", xv.shape(), &[0, 0]));
        }
        let rows = xv.shape()[0];
        if start >= end || end > rows {
            return Err(Error::Index { what: "row", index: end.max(start), len: rows });
        }
        let c = xv.cols();
        let data = xv.data()[start * c..end * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[end - start, c], data)?, Op::SliceRows { x, start }, rg))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.slice_rows(x, r, r + 1)
    }

    /// Identity forward; the backward pass deposits nothing into `x`.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad(x), false)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::dim("backward", lv.shape(), &[]));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, contrib: &[f64]| {
            if self.rg(v) {
                add_into(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Linear { x, w, b } => {
                let wt = &self.nodes[w.0].value;
                let (k, n) = (wt.shape()[0], wt.shape()[1]);
                let m = g.len() / n;
                if self.rg(*x) {
                    let wd = wt.data();
                    let mut dx = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let wrow = &wd[p * n..(p + 1) * n];
                            dx[i * k + p] = gi.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    send(*x, &dx);
                }
                if self.rg(*w) {
                    let xd = val(*x);
                    let mut dw = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let xv = xd[i * k + p];
                            if xv == 0.0 {
                                continue;
                            }
                            for (d, &gv) in dw[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += xv * gv;
                            }
                        }
                    }
                    send(*w, &dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        send(*b, &db);
                    }
                }
            }
            Op::Add(a, b) => {
                send(*a, g);
                send(*b, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.rg(*a) {
                    let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    send(*a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    send(*b, &db);
                }
            }
            Op::Scale(x, f) => {
                let dx: Vec<f64> = g.iter().map(|v| v * f).collect();
                send(*x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; val(*x).len()];
                send(*x, &dx);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let dx = vec![g[0] / n as f64; n];
                send(*x, &dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = g.iter().zip(val(*x)).map(|(gv, &xv)| gv * kernels::gelu_grad(xv)).collect();
                send(*x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, means, rstds } => {
                let xd = val(*x);
                let gd = val(*gamma);
                let d = gd.len();
                let rows = xd.len() / d;
                let mut dx = vec![0.0; xd.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let (mean, rstd) = (means[r], rstds[r]);
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (xd[r * d + j] - mean) * rstd;
                        dxhat[j] = gr[j] * gd[j];
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                send(*x, &dx);
                send(*gamma, &dg);
                send(*beta, &db);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*x, &dx);
            }
            Op::CausalAttention { qkv, heads, probs } => {
                let q = val(*qkv);
                let t = node.value.shape()[0];
                let d = node.value.cols();
                let dh = d / heads;
                let stride = 3 * d;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = vec![0.0; q.len()];
                let mut dp = vec![0.0; t];
                for h in 0..*heads {
                    let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                    for i in 0..t {
                        let gi = &g[i * d + h * dh..i * d + (h + 1) * dh];
                        let p = &probs[(h * t + i) * t..(h * t + i) * t + t];
                        // dP and dV
                        for j in 0..=i {
                            let v = &q[j * stride + vo..j * stride + vo + dh];
                            dp[j] = gi.iter().zip(v).map(|(a, b)| a * b).sum();
                            for (c, &gv) in gi.iter().enumerate() {
                                dqkv[j * stride + vo + c] += p[j] * gv;
                            }
                        }
                        let dot: f64 = (0..=i).map(|j| dp[j] * p[j]).sum();
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                dqkv[i * stride + qo + c] += ds * q[j * stride + ko + c];
                                dqkv[j * stride + ko + c] += ds * q[i * stride + qo + c];
                            }
                        }
                    }
                }
                send(*qkv, &dqkv);
            }
            Op::NegL2 { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                let k = node.value.cols();
                let d = self.nodes[b.0].value.cols();
                let m = ad.len() / d.max(1);
                let out = node.value.data();
                let mut da = vec![0.0; ad.len()];
                let mut dbv = vec![0.0; bd.len()];
                for i in 0..m {
                    for j in 0..k {
                        let dist = -out[i * k + j];
                        if dist == 0.0 {
                            continue;
                        }
                        let coef = g[i * k + j] / dist;
                        for c in 0..d {
                            let diff = ad[i * d + c] - bd[j * d + c];
                            da[i * d + c] -= coef * diff;
                            dbv[j * d + c] += coef * diff;
                        }
                    }
                }
                send(*a, &da);
                send(*b, &dbv);
            }
            Op::CrossEntropy { logits, probs, target, epsilon } => {
                let k = self.nodes[logits.0].value.cols();
                let rows = probs.len() / k;
                let off = epsilon / k as f64;
                let s = g[0] / rows as f64;
                let mut dx = vec![0.0; probs.len()];
                for r in 0..rows {
                    for j in 0..k {
                        let q = if j == *target { 1.0 - epsilon + off } else { off };
                        dx[r * k + j] = s * (probs[r * k + j] - q);
                    }
                }
                send(*logits, &dx);
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let s = 2.0 * g[0] / ad.len().max(1) as f64;
                let da: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| s * (x - y)).collect();
                if self.rg(*b) {
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    send(*b, &db);
                }
                send(*a, &da);
            }
            Op::SliceRows { x, start } => {
                let xv = &self.nodes[x.0].value;
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                send(*x, &dx);
            }
        }
    }
}
