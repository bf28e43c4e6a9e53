use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};
use crate::{GradError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this crate.
///
/// `forward` runs once when the op is recorded and may cache whatever the
/// backward pass needs.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddTiled(Var, Var),
    AddRepeated(Var, Var, usize),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<f64>,
    },
    GroupMean(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

#[derive(Clone, Copy)]
struct AttnGeom {
    batch: usize,
    kv_batch: usize,
    lq: usize,
    lk: usize,
    heads: usize,
    width: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of evaluated primitives. Node inputs always precede the node, so the
/// record is acyclic by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

const LN_EPS: f64 = 1e-10;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> GradError {
    GradError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (used for gradient checks w.r.t. data).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records the current value of a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let out = crate::tensor::matmul(ta, tb)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Adds a bias row `b` (last-axis length) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.len() != tx.cols() {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        let c = tb.len();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    /// `x @ w + b` with `w` shaped `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// `x[r] + y[r % rows(y)]`: `y` is tiled down the rows of `x`.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        let (xr, xc) = tx.as_matrix_dims();
        let (yr, yc) = ty.as_matrix_dims();
        if xc != yc || yr == 0 || xr % yr != 0 {
            return Err(shape_err("add_tiled", tx.shape(), ty.shape()));
        }
        let mut out = tx.clone();
        for (r, row) in out.data_mut().chunks_mut(xc).enumerate() {
            for (o, v) in row.iter_mut().zip(ty.row(r % yr)) {
                *o += v;
            }
        }
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(out, Op::AddTiled(x, y), ng))
    }

    /// `x[r] + y[r / group]`: each row of `y` is repeated over `group` consecutive rows of `x`.
    pub fn add_repeated(&mut self, x: Var, y: Var, group: usize) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        let (xr, xc) = tx.as_matrix_dims();
        let (yr, yc) = ty.as_matrix_dims();
        if xc != yc || group == 0 || xr != yr * group {
            return Err(shape_err("add_repeated", tx.shape(), ty.shape()));
        }
        let mut out = tx.clone();
        for (r, row) in out.data_mut().chunks_mut(xc).enumerate() {
            for (o, v) in row.iter_mut().zip(ty.row(r / group)) {
                *o += v;
            }
        }
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(out, Op::AddRepeated(x, y, group), ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` of the row width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = tx.as_matrix_dims();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != d || tb.len() != d {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(tx.shape());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            let o = &mut out.data_mut()[r * d..(r + 1) * d];
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                o[c] = xh * tg.data()[c] + tb.data()[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Scaled dot-product attention with per-head splitting.
    ///
    /// `q` is `[batch * lq, width]`; `k` and `v` are `[kv_batch * lk, width]`
    /// where `kv_batch` is either `batch` or 1 (shared keys/values broadcast
    /// over the query batch). Projections are not part of this op.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, lq: usize, lk: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (qr, width) = tq.as_matrix_dims();
        let (kr, kc) = tk.as_matrix_dims();
        if tk.shape() != tv.shape() || kc != width || heads == 0 || width % heads != 0 || lq == 0 || lk == 0 {
            return Err(shape_err("attention", tq.shape(), tk.shape()));
        }
        if qr % lq != 0 || kr % lk != 0 {
            return Err(shape_err("attention", tq.shape(), tk.shape()));
        }
        let batch = qr / lq;
        let kv_batch = kr / lk;
        if kv_batch != batch && kv_batch != 1 {
            return Err(shape_err("attention batch", tq.shape(), tk.shape()));
        }
        let geom = AttnGeom {
            batch,
            kv_batch,
            lq,
            lk,
            heads,
            width,
        };
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let mut out = Tensor::zeros(tq.shape());
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let od = out.data_mut();
        let mut scores = vec![0.0; lk];
        for b in 0..batch {
            let kb = if kv_batch == 1 { 0 } else { b };
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qrow = &qd[(b * lq + i) * width + off..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kd[(kb * lk + j) * width + off..][..dh];
                        *s = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(&mut scores);
                    let p = &mut probs[((b * heads + h) * lq + i) * lk..][..lk];
                    p.copy_from_slice(&scores);
                    let orow = &mut od[(b * lq + i) * width + off..][..dh];
                    for (j, &pj) in scores.iter().enumerate() {
                        let vrow = &vd[(kb * lk + j) * width + off..][..dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, geom, probs }, ng))
    }

    /// Mean over consecutive groups of `group` rows: `[n * group, d] -> [n, d]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = tx.as_matrix_dims();
        if group == 0 || rows % group != 0 {
            return Err(GradError::ShapeMismatch(format!(
                "group_mean: {} rows not divisible by {group}",
                rows
            )));
        }
        let n = rows / group;
        let mut out = Tensor::zeros(&[n, d]);
        let inv = 1.0 / group as f64;
        for r in 0..rows {
            let o = &mut out.data_mut()[(r / group) * d..][..d];
            for (ov, xv) in o.iter_mut().zip(tx.row(r)) {
                *ov += xv * inv;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::GroupMean(x, group), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.ng(x);
        self.push(out, Op::Mean(x), ng)
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn custom(&mut self, inputs: &[Var], mut op: Box<dyn CustomOp>) -> Result<Var> {
        let out = {
            let ts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&ts)?
        };
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(GradError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("slot initialised"));
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.as_matrix_dims();
                let n = tb.cols();
                self.acc_with(grads, *a, |ga| {
                    gemm(m, n, k, g.data(), false, tb.data(), true, 1.0, ga.data_mut());
                });
                self.acc_with(grads, *b, |gb| {
                    gemm(k, m, n, ta.data(), true, g.data(), false, 1.0, gb.data_mut());
                });
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                let c = self.value(*b).len();
                self.acc_with(grads, *b, |gb| {
                    for row in g.data().chunks(c) {
                        for (o, v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                )
                .expect("same shape");
                let gb = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                )
                .expect("same shape");
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|v| v * s)),
            Op::AddTiled(x, y) => {
                self.acc(grads, *x, g.clone());
                let ty = self.value(*y);
                let (yr, c) = ty.as_matrix_dims();
                self.acc_with(grads, *y, |gy| {
                    for (r, row) in g.data().chunks(c).enumerate() {
                        let o = &mut gy.data_mut()[(r % yr) * c..][..c];
                        for (ov, v) in o.iter_mut().zip(row) {
                            *ov += v;
                        }
                    }
                });
            }
            Op::AddRepeated(x, y, group) => {
                self.acc(grads, *x, g.clone());
                let c = self.value(*y).cols();
                self.acc_with(grads, *y, |gy| {
                    for (r, row) in g.data().chunks(c).enumerate() {
                        let o = &mut gy.data_mut()[(r / group) * c..][..c];
                        for (ov, v) in o.iter_mut().zip(row) {
                            *ov += v;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let data = tx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                    })
                    .collect();
                self.acc(grads, *x, Tensor::new(tx.shape(), data).expect("same shape"));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let d = tg.len();
                let rows = rstd.len();
                self.acc_with(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for c in 0..d {
                            gg.data_mut()[c] += g.data()[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                self.acc_with(grads, *beta, |gb| {
                    for row in g.data().chunks(d) {
                        for (o, v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
                self.acc_with(grads, *x, |gx| {
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let grow = &g.data()[r * d..][..d];
                        let xh = &xhat[r * d..][..d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            dxh[c] = grow[c] * tg.data()[c];
                            m1 += dxh[c];
                            m2 += dxh[c] * xh[c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let o = &mut gx.data_mut()[r * d..][..d];
                        for c in 0..d {
                            o[c] += rstd[r] * (dxh[c] - m1 - xh[c] * m2);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = Tensor::zeros(y.shape());
                for ((o, yr), gr) in gx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let s = dot(yr, gr);
                    for j in 0..c {
                        o[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Attention { q, k, v, geom, probs } => {
                self.attention_backward(*q, *k, *v, geom, probs, g, grads);
            }
            Op::GroupMean(x, group) => {
                let tx = self.value(*x);
                let d = tx.cols();
                let inv = 1.0 / *group as f64;
                let mut gx = Tensor::zeros(tx.shape());
                for (r, row) in gx.data_mut().chunks_mut(d).enumerate() {
                    for (o, gv) in row.iter_mut().zip(g.row(r / group)) {
                        *o = gv * inv;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.clone().reshape(&shape).expect("same length"));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                self.acc(grads, *x, Tensor::full(t.shape(), g.item() / t.len() as f64));
            }
            Op::Custom { inputs, op } => {
                let ts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&ts, &node.value, g);
                for (&v, gv) in inputs.iter().zip(gs) {
                    self.acc(grads, v, gv);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: &AttnGeom,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let AttnGeom {
            batch,
            kv_batch,
            lq,
            lk,
            heads,
            width,
        } = *geom;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = Tensor::zeros(tq.shape());
        let mut gk = Tensor::zeros(tk.shape());
        let mut gv = Tensor::zeros(tv.shape());
        let mut dp = vec![0.0; lk];
        for b in 0..batch {
            let kb = if kv_batch == 1 { 0 } else { b };
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qi = (b * lq + i) * width + off;
                    let grow = &g.data()[qi..][..dh];
                    let p = &probs[((b * heads + h) * lq + i) * lk..][..lk];
                    for j in 0..lk {
                        let kj = (kb * lk + j) * width + off;
                        dp[j] = dot(grow, &tv.data()[kj..][..dh]);
                        let gvr = &mut gv.data_mut()[kj..][..dh];
                        for (o, gval) in gvr.iter_mut().zip(grow) {
                            *o += p[j] * gval;
                        }
                    }
                    let s = dot(p, &dp);
                    for j in 0..lk {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = (kb * lk + j) * width + off;
                        for c in 0..dh {
                            gq.data_mut()[qi + c] += ds * tk.data()[kj + c];
                            gk.data_mut()[kj + c] += ds * tq.data()[qi + c];
                        }
                    }
                }
            }
        }
        self.acc(grads, q, gq);
        self.acc(grads, k, gk);
        self.acc(grads, v, gv);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient recorded on `graph` into `store`.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) {
        let mut entries: Vec<_> = graph.params.iter().collect();
        entries.sort_by_key(|(id, _)| **id);
        for (&id, &v) in entries {
            if let Some(g) = self.wrt(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum(x W) for a single row x => dW[i][j] = x[i]
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.5, -1.0, 2.0]]));
        let wv = g.param(&store, w);
        let y = g.matmul(x, wv).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        grads.accumulate_into(&g, &mut store);
        assert_eq!(store.grad(w).data(), &[0.5, 0.5, -1.0, -1.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[&[1.0, 2.0]])).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let z = g.scale(wv, 0.0);
        let loss = g.sum(z);
        let grads = g.backward(loss).unwrap();
        grads.accumulate_into(&g, &mut store);
        assert!(store.grad(w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.7));
        let y = g.softmax(x);
        assert!(g.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1.0, 5.0, -2.0, 0.3], &[10.0, 11.0, 9.0, 10.5]]));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(GradError::NonScalarLoss(_))));
    }

    #[test]
    fn attention_with_one_key_returns_its_value() {
        let mut g = Graph::new();
        let q = g.constant(t(&[&[1.0, -2.0, 0.5, 3.0], &[0.0, 0.1, 9.0, -4.0]]));
        let k = g.constant(t(&[&[0.3, 0.2, -0.7, 1.1]]));
        let v = g.constant(t(&[&[4.0, 5.0, 6.0, 7.0]]));
        let o = g.attention(q, k, v, 2, 1, 2).unwrap();
        for r in 0..2 {
            assert_eq!(g.value(o).row(r), &[4.0, 5.0, 6.0, 7.0]);
        }
    }

    #[test]
    fn shape_mismatch_in_add() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.add(a, b), Err(GradError::ShapeMismatch(_))));
    }
}
