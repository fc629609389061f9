//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value and enough bookkeeping to push adjoints back through it. Tape order
//! is a topological order by construction, so [`Graph::backward`] is a single
//! reverse sweep that touches each node once. Parameter gradients accumulate
//! across backward calls until [`Graph::zero_grads`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Named parameter store. Iteration is name-ordered, so everything derived
/// from it (SGD updates, checkpoints) is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor2>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor2) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor2)> {
        self.map.iter()
    }

    /// Glorot-uniform weight, registered under `name`.
    pub fn init_weight(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        self.insert(name, Tensor2::glorot(rows, cols, rng));
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor2::zeros(rows, cols));
    }

    pub fn init_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor2::filled(rows, cols, 1.0));
    }

    /// Plain gradient-descent step over every gradient entry.
    pub fn sgd_step(&mut self, grads: &BTreeMap<String, Tensor2>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            if p.rows() != g.rows() || p.cols() != g.cols() {
                return Err(Error::Dim(format!(
                    "gradient shape {}x{} vs parameter {}x{} for {name:?}",
                    g.rows(),
                    g.cols(),
                    p.rows(),
                    p.cols()
                )));
            }
            let data = p.data_mut();
            for (v, gv) in data.iter_mut().zip(g.data()) {
                *v -= lr * gv;
            }
        }
        Ok(())
    }
}

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

enum Op {
    Const,
    Param(String),
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    MulElem(usize, usize),
    ScaleRows(usize, usize),
    ScaleConst(usize, f64),
    Transpose(usize),
    RowMax { x: usize, argmax: Vec<usize> },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Gelu(usize),
    Sigmoid(usize),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, from: usize, to: usize },
    SliceRows { x: usize, from: usize, to: usize },
    SumAll(usize),
    MeanAll(usize),
    MeanRows(usize),
    GatherCols { x: usize, idx: Vec<usize> },
    SelectRows { x: usize, ids: Vec<usize> },
    Neg(usize),
    LnClamped { x: usize, floor: f64 },
}

struct Node {
    value: Tensor2,
    op: Op,
}

/// Differentiation tape. One graph per forward pass; parameters live outside
/// in a [`Params`] store and are pulled in as named leaves.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: BTreeMap<String, Tensor2>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, r: TensorRef) -> &Tensor2 {
        &self.nodes[r.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> TensorRef {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node { value, op });
        TensorRef(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor2) -> TensorRef {
        self.push(value, Op::Const)
    }

    /// Differentiable leaf bound to a named parameter.
    pub fn param(&mut self, params: &Params, name: &str) -> Result<TensorRef> {
        let value = params.get(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Matmul(a.0, b.0)))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    /// Broadcast a 1xD row over every row of an NxD matrix.
    pub fn add_row(&mut self, x: TensorRef, row: TensorRef) -> Result<TensorRef> {
        let (xv, rv) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::Dim(format!(
                "add_row: {}x{} + {}x{}",
                xv.rows(),
                xv.cols(),
                rv.rows(),
                rv.cols()
            )));
        }
        let mut out = xv.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for c in 0..cols {
                let v = out.at(r, c) + rv.at(0, c);
                out.set(r, c, v);
            }
        }
        Ok(self.push(out, Op::AddRow(x.0, row.0)))
    }

    pub fn mul_elem(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(Error::Dim("mul_elem shape mismatch".into()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor2::new(av.rows(), av.cols(), data)?;
        Ok(self.push(v, Op::MulElem(a.0, b.0)))
    }

    /// Scale row i of `x` by the scalar `s[i, 0]`.
    pub fn scale_rows(&mut self, x: TensorRef, s: TensorRef) -> Result<TensorRef> {
        let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        if sv.cols() != 1 || sv.rows() != xv.rows() {
            return Err(Error::Dim(format!(
                "scale_rows: {}x{} by {}x{}",
                xv.rows(),
                xv.cols(),
                sv.rows(),
                sv.cols()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let f = sv.at(r, 0);
            for c in 0..out.cols() {
                let v = out.at(r, c) * f;
                out.set(r, c, v);
            }
        }
        Ok(self.push(out, Op::ScaleRows(x.0, s.0)))
    }

    pub fn scale_const(&mut self, x: TensorRef, c: f64) -> TensorRef {
        let v = self.nodes[x.0].value.scale(c);
        self.push(v, Op::ScaleConst(x.0, c))
    }

    pub fn transpose(&mut self, x: TensorRef) -> TensorRef {
        let v = self.nodes[x.0].value.transpose();
        self.push(v, Op::Transpose(x.0))
    }

    /// Per-row maximum, Nx1. Ties give gradient to the first maximum.
    pub fn row_max(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xv = &self.nodes[x.0].value;
        if xv.cols() == 0 {
            return Err(Error::Dim("row_max on zero-column matrix".into()));
        }
        let mut out = Tensor2::zeros(xv.rows(), 1);
        let mut argmax = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let (mut best, mut best_c) = (row[0], 0usize);
            for (c, v) in row.iter().enumerate().skip(1) {
                if *v > best {
                    best = *v;
                    best_c = c;
                }
            }
            out.set(r, 0, best);
            argmax.push(best_c);
        }
        Ok(self.push(out, Op::RowMax { x: x.0, argmax }))
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, x: TensorRef) -> Result<TensorRef> {
        let v = softmax_rows_value(&self.nodes[x.0].value)?;
        Ok(self.push(v, Op::SoftmaxRows(x.0)))
    }

    pub fn log_softmax_rows(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xv = &self.nodes[x.0].value;
        if xv.cols() == 0 {
            return Err(Error::Dim("log_softmax on zero-column matrix".into()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = xv.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for c in 0..out.cols() {
                out.set(r, c, xv.at(r, c) - lse);
            }
        }
        Ok(self.push(out, Op::LogSoftmaxRows(x.0)))
    }

    /// Per-row layer normalization with learned gain/bias (both 1xD).
    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
        eps: f64,
    ) -> Result<TensorRef> {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let d = xv.cols();
        if gv.rows() != 1 || gv.cols() != d || bv.rows() != 1 || bv.cols() != d {
            return Err(Error::Dim("layer_norm gain/bias must be 1xD".into()));
        }
        let mut out = Tensor2::zeros(xv.rows(), d);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                let xh = (row[c] - mean) * inv;
                out.set(r, c, gv.at(0, c) * xh + bv.at(0, c));
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        ))
    }

    /// Smooth gaussian-error activation (tanh form).
    pub fn gelu(&mut self, x: TensorRef) -> TensorRef {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| gelu_fwd(v)).collect::<Vec<_>>();
        let v = Tensor2::new(xv.rows(), xv.cols(), data).expect("same shape");
        self.push(v, Op::Gelu(x.0))
    }

    pub fn sigmoid(&mut self, x: TensorRef) -> TensorRef {
        let xv = &self.nodes[x.0].value;
        let data = xv
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect::<Vec<_>>();
        let v = Tensor2::new(xv.rows(), xv.cols(), data).expect("same shape");
        self.push(v, Op::Sigmoid(x.0))
    }

    pub fn concat_cols(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rows() != bv.rows() {
            return Err(Error::Dim("concat_cols row mismatch".into()));
        }
        let mut out = Tensor2::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            for c in 0..av.cols() {
                out.set(r, c, av.at(r, c));
            }
            for c in 0..bv.cols() {
                out.set(r, av.cols() + c, bv.at(r, c));
            }
        }
        Ok(self.push(out, Op::ConcatCols(a.0, b.0)))
    }

    pub fn concat_rows(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_rows on empty list".into()));
        }
        let cols = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != cols {
                return Err(Error::Dim("concat_rows column mismatch".into()));
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let v = Tensor2::new(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    pub fn slice_cols(&mut self, x: TensorRef, from: usize, to: usize) -> Result<TensorRef> {
        let xv = &self.nodes[x.0].value;
        if from >= to || to > xv.cols() {
            return Err(Error::Dim(format!(
                "slice_cols {from}..{to} of {} cols",
                xv.cols()
            )));
        }
        let mut out = Tensor2::zeros(xv.rows(), to - from);
        for r in 0..xv.rows() {
            for c in from..to {
                out.set(r, c - from, xv.at(r, c));
            }
        }
        Ok(self.push(out, Op::SliceCols { x: x.0, from, to }))
    }

    pub fn slice_rows(&mut self, x: TensorRef, from: usize, to: usize) -> Result<TensorRef> {
        let xv = &self.nodes[x.0].value;
        if from >= to || to > xv.rows() {
            return Err(Error::Dim(format!(
                "slice_rows {from}..{to} of {} rows",
                xv.rows()
            )));
        }
        let data = xv.data()[from * xv.cols()..to * xv.cols()].to_vec();
        let v = Tensor2::new(to - from, xv.cols(), data)?;
        Ok(self.push(v, Op::SliceRows { x: x.0, from, to }))
    }

    pub fn sum_all(&mut self, x: TensorRef) -> TensorRef {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor2::filled(1, 1, s), Op::SumAll(x.0))
    }

    pub fn mean_all(&mut self, x: TensorRef) -> TensorRef {
        let xv = &self.nodes[x.0].value;
        let n = xv.data().len() as f64;
        let s: f64 = xv.data().iter().sum();
        self.push(Tensor2::filled(1, 1, s / n), Op::MeanAll(x.0))
    }

    /// Column-wise mean over rows, 1xD.
    pub fn mean_rows(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xv = &self.nodes[x.0].value;
        if xv.rows() == 0 {
            return Err(Error::Dim("mean_rows on empty matrix".into()));
        }
        let mut out = Tensor2::zeros(1, xv.cols());
        for c in 0..xv.cols() {
            let mut s = 0.0;
            for r in 0..xv.rows() {
                s += xv.at(r, c);
            }
            out.set(0, c, s / xv.rows() as f64);
        }
        Ok(self.push(out, Op::MeanRows(x.0)))
    }

    /// Pick one entry per row: out[i, 0] = x[i, idx[i]].
    pub fn gather_cols(&mut self, x: TensorRef, idx: &[usize]) -> Result<TensorRef> {
        let xv = &self.nodes[x.0].value;
        if idx.len() != xv.rows() {
            return Err(Error::Dim("gather_cols needs one index per row".into()));
        }
        if let Some(bad) = idx.iter().find(|&&c| c >= xv.cols()) {
            return Err(Error::Invalid(format!("gather_cols index {bad} out of range")));
        }
        let mut out = Tensor2::zeros(xv.rows(), 1);
        for (r, &c) in idx.iter().enumerate() {
            out.set(r, 0, xv.at(r, c));
        }
        Ok(self.push(
            out,
            Op::GatherCols {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Row lookup (embedding table access): out[i, :] = x[ids[i], :].
    pub fn select_rows(&mut self, x: TensorRef, ids: &[usize]) -> Result<TensorRef> {
        let xv = &self.nodes[x.0].value;
        if ids.is_empty() {
            return Err(Error::Dim("select_rows with no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::Invalid(format!("select_rows id {bad} out of range")));
        }
        let mut data = Vec::with_capacity(ids.len() * xv.cols());
        for &r in ids {
            data.extend_from_slice(xv.row(r));
        }
        let v = Tensor2::new(ids.len(), xv.cols(), data)?;
        Ok(self.push(
            v,
            Op::SelectRows {
                x: x.0,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn neg(&mut self, x: TensorRef) -> TensorRef {
        let v = self.nodes[x.0].value.scale(-1.0);
        self.push(v, Op::Neg(x.0))
    }

    /// ln(max(x, floor)); clamped entries get zero gradient.
    pub fn ln_clamped(&mut self, x: TensorRef, floor: f64) -> TensorRef {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| v.max(floor).ln()).collect::<Vec<_>>();
        let v = Tensor2::new(xv.rows(), xv.cols(), data).expect("same shape");
        self.push(v, Op::LnClamped { x: x.0, floor })
    }

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
    /// this graph's gradient table; call [`Graph::zero_grads`] between
    /// unrelated passes.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        self.nodes[loss.0].value.scalar().map_err(|_| {
            Error::Invalid(format!(
                "backward needs a scalar loss, got {}x{}",
                self.nodes[loss.0].value.rows(),
                self.nodes[loss.0].value.cols()
            ))
        })?;
        // Fresh per-node adjoints each pass.
        let mut adj: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor2::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(name) => {
                    let slot = self
                        .grads
                        .entry(name.clone())
                        .or_insert_with(|| Tensor2::zeros(g.rows(), g.cols()));
                    *slot = slot.add(&g)?;
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let bt = self.nodes[b].value.transpose();
                    let at = self.nodes[a].value.transpose();
                    let da = g.matmul(&bt)?;
                    let db = at.matmul(&g)?;
                    accumulate(&mut adj, a, da)?;
                    accumulate(&mut adj, b, db)?;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut adj, a, g.clone())?;
                    accumulate(&mut adj, b, g)?;
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut adj, a, g.clone())?;
                    accumulate(&mut adj, b, g.scale(-1.0))?;
                }
                Op::AddRow(x, row) => {
                    let (x, row) = (*x, *row);
                    let mut dr = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let v = dr.at(0, c) + g.at(r, c);
                            dr.set(0, c, v);
                        }
                    }
                    accumulate(&mut adj, x, g)?;
                    accumulate(&mut adj, row, dr)?;
                }
                Op::MulElem(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = elementwise(&g, &self.nodes[b].value, |g, o| g * o);
                    let db = elementwise(&g, &self.nodes[a].value, |g, o| g * o);
                    accumulate(&mut adj, a, da)?;
                    accumulate(&mut adj, b, db)?;
                }
                Op::ScaleRows(x, s) => {
                    let (x, s) = (*x, *s);
                    let xv = &self.nodes[x].value;
                    let sv = &self.nodes[s].value;
                    let mut dx = g.clone();
                    let mut ds = Tensor2::zeros(sv.rows(), 1);
                    for r in 0..g.rows() {
                        let f = sv.at(r, 0);
                        let mut acc = 0.0;
                        for c in 0..g.cols() {
                            acc += g.at(r, c) * xv.at(r, c);
                            let v = dx.at(r, c) * f;
                            dx.set(r, c, v);
                        }
                        ds.set(r, 0, acc);
                    }
                    accumulate(&mut adj, x, dx)?;
                    accumulate(&mut adj, s, ds)?;
                }
                Op::ScaleConst(x, c) => {
                    let (x, c) = (*x, *c);
                    accumulate(&mut adj, x, g.scale(c))?;
                }
                Op::Transpose(x) => {
                    let x = *x;
                    accumulate(&mut adj, x, g.transpose())?;
                }
                Op::RowMax { x, argmax } => {
                    let x = *x;
                    let xv = &self.nodes[x].value;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (r, &c) in argmax.iter().enumerate() {
                        dx.set(r, c, g.at(r, 0));
                    }
                    accumulate(&mut adj, x, dx)?;
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = (0..y.cols()).map(|c| g.at(r, c) * y.at(r, c)).sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, y.at(r, c) * (g.at(r, c) - dot));
                        }
                    }
                    accumulate(&mut adj, x, dx)?;
                }
                Op::LogSoftmaxRows(x) => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gsum: f64 = (0..y.cols()).map(|c| g.at(r, c)).sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, g.at(r, c) - y.at(r, c).exp() * gsum);
                        }
                    }
                    accumulate(&mut adj, x, dx)?;
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let xv = &self.nodes[x].value;
                    let gv = &self.nodes[gain].value;
                    let d = xv.cols();
                    let mut dx = Tensor2::zeros(xv.rows(), d);
                    let mut dgain = Tensor2::zeros(1, d);
                    let mut dbias = Tensor2::zeros(1, d);
                    for r in 0..xv.rows() {
                        let row = xv.row(r);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            (0..d).map(|c| g.at(r, c) * gv.at(0, c)).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for c in 0..d {
                            dx.set(r, c, inv * (dxhat[c] - m1 - xhat[c] * m2));
                            let vg = dgain.at(0, c) + g.at(r, c) * xhat[c];
                            dgain.set(0, c, vg);
                            let vb = dbias.at(0, c) + g.at(r, c);
                            dbias.set(0, c, vb);
                        }
                    }
                    accumulate(&mut adj, x, dx)?;
                    accumulate(&mut adj, gain, dgain)?;
                    accumulate(&mut adj, bias, dbias)?;
                }
                Op::Gelu(x) => {
                    let x = *x;
                    let xv = &self.nodes[x].value;
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| gv * gelu_grad(v))
                        .collect();
                    let dx = Tensor2::new(xv.rows(), xv.cols(), data)?;
                    accumulate(&mut adj, x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let data = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &gv)| gv * s * (1.0 - s))
                        .collect();
                    let dx = Tensor2::new(y.rows(), y.cols(), data)?;
                    accumulate(&mut adj, x, dx)?;
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let ac = self.nodes[a].value.cols();
                    let bc = self.nodes[b].value.cols();
                    let mut da = Tensor2::zeros(g.rows(), ac);
                    let mut db = Tensor2::zeros(g.rows(), bc);
                    for r in 0..g.rows() {
                        for c in 0..ac {
                            da.set(r, c, g.at(r, c));
                        }
                        for c in 0..bc {
                            db.set(r, c, g.at(r, ac + c));
                        }
                    }
                    accumulate(&mut adj, a, da)?;
                    accumulate(&mut adj, b, db)?;
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p].value.rows();
                        let cols = g.cols();
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut adj, p, Tensor2::new(rows, cols, data)?)?;
                        offset += rows;
                    }
                }
                Op::SliceCols { x, from, to } => {
                    let (x, from, to) = (*x, *from, *to);
                    let xv = &self.nodes[x].value;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        for c in from..to {
                            dx.set(r, c, g.at(r, c - from));
                        }
                    }
                    accumulate(&mut adj, x, dx)?;
                }
                Op::SliceRows { x, from, to } => {
                    let (x, from, to) = (*x, *from, *to);
                    let xv = &self.nodes[x].value;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for r in from..to {
                        for c in 0..xv.cols() {
                            dx.set(r, c, g.at(r - from, c));
                        }
                    }
                    accumulate(&mut adj, x, dx)?;
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let xv = &self.nodes[x].value;
                    let dx = Tensor2::filled(xv.rows(), xv.cols(), g.at(0, 0));
                    accumulate(&mut adj, x, dx)?;
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    let xv = &self.nodes[x].value;
                    let n = xv.data().len() as f64;
                    let dx = Tensor2::filled(xv.rows(), xv.cols(), g.at(0, 0) / n);
                    accumulate(&mut adj, x, dx)?;
                }
                Op::MeanRows(x) => {
                    let x = *x;
                    let xv = &self.nodes[x].value;
                    let n = xv.rows() as f64;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        for c in 0..xv.cols() {
                            dx.set(r, c, g.at(0, c) / n);
                        }
                    }
                    accumulate(&mut adj, x, dx)?;
                }
                Op::GatherCols { x, idx } => {
                    let x = *x;
                    let idx = idx.clone();
                    let xv = &self.nodes[x].value;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (r, &c) in idx.iter().enumerate() {
                        dx.set(r, c, g.at(r, 0));
                    }
                    accumulate(&mut adj, x, dx)?;
                }
                Op::SelectRows { x, ids } => {
                    let x = *x;
                    let ids = ids.clone();
                    let xv = &self.nodes[x].value;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (out_r, &src_r) in ids.iter().enumerate() {
                        for c in 0..xv.cols() {
                            let v = dx.at(src_r, c) + g.at(out_r, c);
                            dx.set(src_r, c, v);
                        }
                    }
                    accumulate(&mut adj, x, dx)?;
                }
                Op::Neg(x) => {
                    let x = *x;
                    accumulate(&mut adj, x, g.scale(-1.0))?;
                }
                Op::LnClamped { x, floor } => {
                    let (x, floor) = (*x, *floor);
                    let xv = &self.nodes[x].value;
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > floor { gv / v } else { 0.0 })
                        .collect();
                    let dx = Tensor2::new(xv.rows(), xv.cols(), data)?;
                    accumulate(&mut adj, x, dx)?;
                }
            }
        }
        Ok(())
    }

    pub fn grads(&self) -> &BTreeMap<String, Tensor2> {
        &self.grads
    }

    pub fn take_grads(&mut self) -> BTreeMap<String, Tensor2> {
        std::mem::take(&mut self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }
}

fn accumulate(adj: &mut [Option<Tensor2>], idx: usize, delta: Tensor2) -> Result<()> {
    match &mut adj[idx] {
        Some(existing) => {
            *existing = existing.add(&delta)?;
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

fn elementwise(g: &Tensor2, other: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(a, b)| f(*a, *b))
        .collect();
    Tensor2::new(g.rows(), g.cols(), data).expect("same shape")
}

/// Plain-value row softmax, shared with non-graph callers.
pub fn softmax_rows_value(x: &Tensor2) -> Result<Tensor2> {
    if x.cols() == 0 {
        return Err(Error::Dim("softmax on zero-column matrix".into()));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..x.cols() {
            let e = (x.at(r, c) - m).exp();
            out.set(r, c, e);
            denom += e;
        }
        for c in 0..x.cols() {
            let v = out.at(r, c) / denom;
            out.set(r, c, v);
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x.powi(3));
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Central finite-difference gradient check.
///
/// Runs `f` once for the analytic gradients, then perturbs every parameter
/// coordinate by +-`step` and compares. Returns the maximum relative error,
/// with denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, params: &Params, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Params) -> Result<TensorRef>,
{
    if step <= 0.0 {
        return Err(Error::Invalid("grad_check step must be > 0".into()));
    }
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss)?;
    let analytic = g.take_grads();

    let eval = |p: &Params| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, p)?;
        g.value(loss).scalar()
    };

    let mut worst = 0.0f64;
    for (name, base) in params.iter() {
        for i in 0..base.data().len() {
            let orig = base.data()[i];
            let mut p = params.clone();
            p.get_mut(name)?.data_mut()[i] = orig + step;
            let up = eval(&p)?;
            p.get_mut(name)?.data_mut()[i] = orig - step;
            let down = eval(&p)?;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(name).map_or(0.0, |t| t.data()[i]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
