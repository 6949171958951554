//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records each op with the intermediates its backward rule needs.
//! [`Tape::backward`] walks the records in exact reverse order, accumulates
//! parameter gradients into a [`ParamStore`] and clears the tape, so every
//! forward pass supports one backward pass.

use std::collections::{BTreeMap, HashMap};

use super::ops::{self, gemm, sigmoid, softplus};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Input,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Sum(Var),
    Dropout(Var, Tensor),
    BceWithLogits(Var, Vec<f64>),
    CrossEntropyRows { x: Var, targets: Vec<usize>, probs: Tensor },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: HashMap<Var, Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

const LN_EPS: f64 = 1e-5;

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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).tracked)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is reported in [`Gradients::inputs`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Binds the current value of a stored parameter. Repeated calls for the
    /// same name return the same handle.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.param_vars.get(name) {
            return Ok(*v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn gemm_op(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = gemm(self.value(a), ta, self.value(b), tb)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm_op(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm_op(a, b, false, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    /// Adds a `1×d` row to every row of an `n×d` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims();
        if self.value(row).dims() != (1, d) {
            return Err(Error::Dimension(format!(
                "add_row: {:?} + {:?}",
                self.value(a).shape(),
                self.value(row).shape()
            )));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            for (o, v) in out.row_slice_mut(i).iter_mut().zip(&r) {
                *o += v;
            }
        }
        let tracked = self.tracked(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Scale(a, s), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Relu(a), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Sigmoid(a), tracked)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(a))?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), tracked))
    }

    pub fn mean_over_rows(&mut self, a: Var) -> Result<Var> {
        let out = ops::mean_over_rows(self.value(a))?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::MeanRows(a), tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != n) {
            return Err(Error::Dimension("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(n, total);
        for r in 0..n {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row_slice(r);
                out.row_slice_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let tracked = self.tracked(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims();
        if len == 0 || start + len > d {
            return Err(Error::Dimension(format!("slice_cols {start}+{len} of width {d}")));
        }
        let mut out = Tensor::zeros(n, len);
        for r in 0..n {
            out.row_slice_mut(r)
                .copy_from_slice(&self.value(x).row_slice(r)[start..start + len]);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, tracked))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims();
        if idx.is_empty() {
            return Err(Error::Dimension("gather_rows: empty index".into()));
        }
        let mut out = Tensor::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::Range { what: "row", id: i, size: n });
            }
            out.row_slice_mut(r).copy_from_slice(self.value(x).row_slice(i));
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), tracked))
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims();
        if idx.is_empty() {
            return Err(Error::Dimension("gather_cols: empty index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
            return Err(Error::Range { what: "column", id: bad, size: d });
        }
        let mut out = Tensor::zeros(n, idx.len());
        for r in 0..n {
            let src = self.value(x).row_slice(r);
            for (o, &i) in out.row_slice_mut(r).iter_mut().zip(idx) {
                *o = src[i];
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::GatherCols(x, idx.to_vec()), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// Multiplies by a precomputed mask (already scaled by `1/(1-p)`).
    pub fn dropout_mask(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        if !self.value(x).same_shape(&mask) {
            return Err(Error::Dimension("dropout mask shape".into()));
        }
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Dropout(x, mask), tracked))
    }

    /// `Σ softplus(z) − y·z`: binary cross-entropy of `sigmoid(z)` against
    /// targets `y`, summed over all entries of a `1×n` logit row.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let zv = self.value(z);
        if zv.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "bce: {} logits vs {} targets",
                zv.len(),
                targets.len()
            )));
        }
        let loss = zv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        let tracked = self.tracked(&[z]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(z, targets.to_vec()), tracked))
    }

    /// `Σ_r −ln softmax(x_r)[t_r]`.
    pub fn cross_entropy_rows(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims();
        if targets.len() != n {
            return Err(Error::Dimension(format!("cross_entropy: {n} rows vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= d) {
            return Err(Error::Range { what: "class", id: bad, size: d });
        }
        let probs = ops::softmax_rows(self.value(x))?;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = self.value(x).row_slice(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows { x, targets: targets.to_vec(), probs },
            tracked,
        ))
    }

    /// Per-row normalization with learned `1×d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims();
        if self.value(gain).dims() != (1, d) || self.value(bias).dims() != (1, d) {
            return Err(Error::Dimension("layer_norm gain/bias width".into()));
        }
        let mut xhat = Tensor::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = self.value(x).row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_slice_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, gj), bj) in out.row_slice_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gj + bj;
            }
        }
        let tracked = self.tracked(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, tracked))
    }

    /// Backpropagates from a scalar `loss`, adds parameter gradients into
    /// `store` and clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward_grads(loss)?;
        store.accumulate(&grads)?;
        Ok(grads)
    }

    /// Backpropagates from a scalar and returns the gradients without
    /// touching any store. Clears the tape.
    pub fn backward_grads(&mut self, loss: Var) -> Result<Gradients> {
        self.check_output(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_seeded(loss, Tensor::scalar(1.0))
    }

    fn check_output(&self, out: Var) -> Result<()> {
        if self.nodes.is_empty() || out.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called without a taped forward pass (tapes are single-use)".into(),
            ));
        }
        Ok(())
    }

    /// Backpropagates an arbitrary upstream gradient `seed` for `out`.
    pub fn backward_seeded(&mut self, out: Var, seed: Tensor) -> Result<Gradients> {
        self.check_output(out)?;
        if !self.value(out).same_shape(&seed) {
            return Err(Error::Dimension(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.param_vars.clear();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[out.0] = Some(seed);
        let mut result = Gradients::default();

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let mut send = |v: Var, delta: Tensor| {
                if !nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    result.params.insert(name.clone(), g);
                }
                Op::Input => {
                    result.inputs.insert(Var(i), g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    if nodes[a.0].tracked {
                        let da = if ta {
                            gemm(val(b), tb, &g, true)?
                        } else {
                            gemm(&g, false, val(b), !tb)?
                        };
                        send(a, da);
                    }
                    if nodes[b.0].tracked {
                        let db = if tb {
                            gemm(&g, true, val(a), ta)?
                        } else {
                            gemm(val(a), !ta, &g, false)?
                        };
                        send(b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::AddRow(a, row) => {
                    let (n, d) = g.dims();
                    let mut dr = Tensor::zeros(1, d);
                    for r in 0..n {
                        for (o, v) in dr.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                    send(*row, dr);
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (o, v) in da.data_mut().iter_mut().zip(val(*b).data()) {
                        *o *= v;
                    }
                    let mut db = g;
                    for (o, v) in db.data_mut().iter_mut().zip(val(*a).data()) {
                        *o *= v;
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
                Op::Relu(a) => {
                    let mut da = g;
                    for (o, x) in da.data_mut().iter_mut().zip(val(*a).data()) {
                        if *x <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    send(*a, da);
                }
                Op::Sigmoid(a) => {
                    let mut da = g;
                    for (o, y) in da.data_mut().iter_mut().zip(node.value.data()) {
                        *o *= y * (1.0 - y);
                    }
                    send(*a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = g;
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let dot: f64 = da.row_slice(r).iter().zip(yr).map(|(u, v)| u * v).sum();
                        for (o, yv) in da.row_slice_mut(r).iter_mut().zip(yr) {
                            *o = yv * (*o - dot);
                        }
                    }
                    send(*a, da);
                }
                Op::MeanRows(a) => {
                    let (n, d) = val(*a).dims();
                    let inv = 1.0 / n as f64;
                    let mut da = Tensor::zeros(n, d);
                    for r in 0..n {
                        for (o, v) in da.row_slice_mut(r).iter_mut().zip(g.data()) {
                            *o = v * inv;
                        }
                    }
                    send(*a, da);
                }
                Op::ConcatCols(parts) => {
                    let n = g.rows();
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).cols();
                        let mut dp = Tensor::zeros(n, w);
                        for r in 0..n {
                            dp.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[off..off + w]);
                        }
                        off += w;
                        send(*p, dp);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (n, d) = val(*x).dims();
                    let w = g.cols();
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        dx.row_slice_mut(r)[*start..*start + w].copy_from_slice(g.row_slice(r));
                    }
                    send(*x, dx);
                }
                Op::GatherRows(x, idx) => {
                    let (n, d) = val(*x).dims();
                    let mut dx = Tensor::zeros(n, d);
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in dx.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                    send(*x, dx);
                }
                Op::GatherCols(x, idx) => {
                    let (n, d) = val(*x).dims();
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let src = g.row_slice(r);
                        let dst = dx.row_slice_mut(r);
                        for (c, &i) in idx.iter().enumerate() {
                            dst[i] += src[c];
                        }
                    }
                    send(*x, dx);
                }
                Op::Sum(x) => {
                    let (n, d) = val(*x).dims();
                    send(*x, Tensor::filled(n, d, g.item()));
                }
                Op::Dropout(x, mask) => {
                    let mut dx = g;
                    for (o, m) in dx.data_mut().iter_mut().zip(mask.data()) {
                        *o *= m;
                    }
                    send(*x, dx);
                }
                Op::BceWithLogits(z, y) => {
                    let up = g.item();
                    let zv = val(*z);
                    let data = zv
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(&z, &y)| up * (sigmoid(z) - y))
                        .collect();
                    send(*z, Tensor::new(zv.shape().to_vec(), data)?);
                }
                Op::CrossEntropyRows { x, targets, probs } => {
                    let up = g.item();
                    let mut dx = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dx.row_slice_mut(r)[t] -= 1.0;
                    }
                    dx.scale_assign(up);
                    send(*x, dx);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (n, d) = xhat.dims();
                    let gv = val(*gain).data().to_vec();
                    let mut dgain = Tensor::zeros(1, d);
                    let mut dbias = Tensor::zeros(1, d);
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let gr = g.row_slice(r);
                        let xr = xhat.row_slice(r);
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_x = 0.0;
                        for j in 0..d {
                            dgain.data_mut()[j] += gr[j] * xr[j];
                            dbias.data_mut()[j] += gr[j];
                            let dxh = gr[j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_x += dxh * xr[j];
                        }
                        let scale = inv_std[r] / d as f64;
                        let out = dx.row_slice_mut(r);
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            out[j] = scale * (d as f64 * dxh - sum_dxh - xr[j] * sum_dxh_x);
                        }
                    }
                    send(*gain, dgain);
                    send(*bias, dbias);
                    send(*x, dx);
                }
            }
        }
        Ok(result)
    }
}
