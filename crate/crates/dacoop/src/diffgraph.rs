//! Minimal reverse-mode differentiable computation for the pursuit networks:
//! dense affine layers, rectifier, segment softmax over variable-length
//! neighbor axes, weighted sums, concatenation, means, squared error, and
//! categorical KL, plus a bias-corrected adaptive-moment optimizer.
//!
//! Graphs evaluate eagerly while they are built, so shape mismatches surface
//! at construction and never broadcast silently. Values accumulate in double
//! precision throughout; the networks are a few thousand parameters, so
//! stability beats speed everywhere.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Probabilities are clamped below at this floor inside the KL term.
pub const KL_FLOOR: f64 = 1e-12;

// --- dense kernels ---------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

// --- tensors ---------------------------------------------------------------

/// Dense row-major matrix of doubles. Scalars are 1x1, vectors 1xC or Nx1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{}x{} tensor needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, o: &Tensor) -> bool {
        self.rows == o.rows && self.cols == o.cols
    }
}

// --- parameters ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named parameter arrays with gradient buffers of the same shape.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate parameter '{name}'")));
        }
        let grad = Tensor::zeros(value.rows, value.cols);
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data.fill(0.0);
        }
    }

    /// Hard copy of every value from `other`; names and shapes must match.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape("parameter sets differ in length".into()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || !a.value.same_shape(&b.value) {
                return Err(Error::Shape(format!(
                    "parameter mismatch: {} vs {}",
                    a.name, b.name
                )));
            }
            a.value.data.copy_from_slice(&b.value.data);
        }
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.data.len()).sum()
    }
}

// --- graph -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Contiguous row ranges of a ragged (per-sample) axis.
pub type Segments = Vec<(usize, usize)>;

fn segments_total(segments: &Segments) -> usize {
    segments.iter().map(|s| s.1).sum()
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    /// y = x * w + b, row-wise broadcast of b.
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    ConcatCols(Vec<NodeId>),
    /// Repeat row s of the input segment-length times.
    ExpandRows {
        x: NodeId,
        segments: Segments,
    },
    /// Mean of each segment's rows; empty segments yield zero rows.
    SegmentMean {
        x: NodeId,
        segments: Segments,
    },
    /// Numerically safe softmax within each segment of a column vector.
    SegmentSoftmax {
        logits: NodeId,
        segments: Segments,
    },
    /// Per-segment weighted sum of rows: out_s = sum_j w_j * x_j.
    SegmentWeightedSum {
        x: NodeId,
        weights: NodeId,
        segments: Segments,
    },
    /// Per-segment categorical KL(p_ref || q), q floored at KL_FLOOR.
    SegmentKl {
        p_ref: NodeId,
        q: NodeId,
        segments: Segments,
    },
    RowMean(NodeId),
    AddCol {
        x: NodeId,
        col: NodeId,
    },
    SubCol {
        x: NodeId,
        col: NodeId,
    },
    GatherCols {
        x: NodeId,
        idx: Vec<usize>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Square(NodeId),
    MeanAll(NodeId),
    Scale {
        x: NodeId,
        c: f64,
    },
    /// a + c * b, elementwise.
    AddScaled {
        a: NodeId,
        b: NodeId,
        c: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// A tape of eagerly evaluated operations. Build order is topological by
/// construction; `backward` walks it in reverse exactly once.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Most recently pushed node.
    pub fn last_node(&self) -> Option<NodeId> {
        if self.nodes.is_empty() {
            None
        } else {
            Some(NodeId(self.nodes.len() - 1))
        }
    }

    /// Gradient of the loss with respect to a node, after `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        self.push(Op::Param(id), params.value(id).clone())
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols != wv.rows || bv.rows != 1 || bv.cols != wv.cols {
            return Err(Error::Shape(format!(
                "affine: x {}x{}, w {}x{}, b {}x{}",
                xv.rows, xv.cols, wv.rows, wv.cols, bv.rows, bv.cols
            )));
        }
        let (n, out) = (xv.rows, wv.cols);
        let inner = xv.cols;
        let mut y = Tensor::zeros(n, out);
        for i in 0..n {
            y.row_mut(i).copy_from_slice(bv.row(0));
        }
        for i in 0..n {
            let xrow = xv.row(i);
            let yrow = &mut y.data[i * out..(i + 1) * out];
            for (k, &xk) in xrow.iter().enumerate().take(inner) {
                axpy(yrow, xk, wv.row(k));
            }
        }
        Ok(self.push(Op::Affine { x, w, b }, y))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let y = Tensor {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().map(|v| v.max(0.0)).collect(),
        };
        self.push(Op::Relu(x), y)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let rows = self.value(parts[0]).rows;
        if parts.iter().any(|p| self.value(*p).rows != rows) {
            return Err(Error::Shape("concat: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut y = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for p in parts {
                let pv = self.value(*p);
                y.data[r * cols + at..r * cols + at + pv.cols].copy_from_slice(pv.row(r));
                at += pv.cols;
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), y))
    }

    pub fn expand_rows(&mut self, x: NodeId, segments: Segments) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows != segments.len() {
            return Err(Error::Shape(format!(
                "expand_rows: {} rows vs {} segments",
                xv.rows,
                segments.len()
            )));
        }
        let total = segments_total(&segments);
        let mut y = Tensor::zeros(total, xv.cols);
        for (s, &(start, len)) in segments.iter().enumerate() {
            for r in start..start + len {
                y.row_mut(r).copy_from_slice(self.value(x).row(s));
            }
        }
        Ok(self.push(Op::ExpandRows { x, segments }, y))
    }

    pub fn segment_mean(&mut self, x: NodeId, segments: Segments) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows != segments_total(&segments) {
            return Err(Error::Shape("segment_mean: segment total mismatch".into()));
        }
        let mut y = Tensor::zeros(segments.len(), xv.cols);
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 {
                continue;
            }
            for r in start..start + len {
                let row = self.value(x).row(r).to_vec();
                axpy(y.row_mut(s), 1.0 / len as f64, &row);
            }
        }
        Ok(self.push(Op::SegmentMean { x, segments }, y))
    }

    pub fn segment_softmax(&mut self, logits: NodeId, segments: Segments) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.cols != 1 || lv.rows != segments_total(&segments) {
            return Err(Error::Shape(
                "segment_softmax: expects a column vector".into(),
            ));
        }
        let mut y = Tensor::zeros(lv.rows, 1);
        for &(start, len) in &segments {
            if len == 0 {
                continue;
            }
            let xs = &lv.data[start..start + len];
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, v) in xs.iter().enumerate() {
                let e = (v - max).exp();
                y.data[start + k] = e;
                sum += e;
            }
            for k in 0..len {
                y.data[start + k] /= sum;
            }
        }
        Ok(self.push(Op::SegmentSoftmax { logits, segments }, y))
    }

    pub fn segment_weighted_sum(
        &mut self,
        x: NodeId,
        weights: NodeId,
        segments: Segments,
    ) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(weights));
        let total = segments_total(&segments);
        if xv.rows != total || wv.rows != total || wv.cols != 1 {
            return Err(Error::Shape("segment_weighted_sum: shape mismatch".into()));
        }
        let mut y = Tensor::zeros(segments.len(), xv.cols);
        for (s, &(start, len)) in segments.iter().enumerate() {
            for r in start..start + len {
                let w = self.value(weights).data[r];
                let row = self.value(x).row(r).to_vec();
                axpy(y.row_mut(s), w, &row);
            }
        }
        Ok(self.push(
            Op::SegmentWeightedSum {
                x,
                weights,
                segments,
            },
            y,
        ))
    }

    pub fn segment_kl(&mut self, p_ref: NodeId, q: NodeId, segments: Segments) -> Result<NodeId> {
        let (pv, qv) = (self.value(p_ref), self.value(q));
        let total = segments_total(&segments);
        if pv.rows != total || qv.rows != total || pv.cols != 1 || qv.cols != 1 {
            return Err(Error::Shape(
                "segment_kl: expects matching column vectors".into(),
            ));
        }
        let mut y = Tensor::zeros(segments.len(), 1);
        for (s, &(start, len)) in segments.iter().enumerate() {
            let mut acc = 0.0;
            for r in start..start + len {
                let p = pv.data[r];
                if p > 0.0 {
                    acc += p * (p / qv.data[r].max(KL_FLOOR)).ln();
                }
            }
            y.data[s] = acc;
        }
        Ok(self.push(Op::SegmentKl { p_ref, q, segments }, y))
    }

    pub fn row_mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut y = Tensor::zeros(xv.rows, 1);
        for r in 0..xv.rows {
            y.data[r] = xv.row(r).iter().sum::<f64>() / xv.cols as f64;
        }
        self.push(Op::RowMean(x), y)
    }

    pub fn add_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        self.col_broadcast(x, col, true)
    }

    pub fn sub_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        self.col_broadcast(x, col, false)
    }

    fn col_broadcast(&mut self, x: NodeId, col: NodeId, add: bool) -> Result<NodeId> {
        let (xv, cv) = (self.value(x), self.value(col));
        if cv.cols != 1 || cv.rows != xv.rows {
            return Err(Error::Shape("column broadcast: shape mismatch".into()));
        }
        let mut y = xv.clone();
        for r in 0..y.rows {
            let c = if add { cv.data[r] } else { -cv.data[r] };
            for v in y.row_mut(r) {
                *v += c;
            }
        }
        let op = if add {
            Op::AddCol { x, col }
        } else {
            Op::SubCol { x, col }
        };
        Ok(self.push(op, y))
    }

    pub fn gather_cols(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        if idx.len() != xv.rows || idx.iter().any(|&c| c >= xv.cols) {
            return Err(Error::Shape("gather_cols: bad index vector".into()));
        }
        let mut y = Tensor::zeros(xv.rows, 1);
        for (r, &c) in idx.iter().enumerate() {
            y.data[r] = xv.get(r, c);
        }
        Ok(self.push(Op::GatherCols { x, idx }, y))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, true)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, false)
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, add: bool) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::Shape(format!(
                "elementwise: {}x{} vs {}x{}",
                av.rows, av.cols, bv.rows, bv.cols
            )));
        }
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| if add { x + y } else { x - y })
            .collect();
        let t = Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        let op = if add {
            Op::Add { a, b }
        } else {
            Op::Sub { a, b }
        };
        Ok(self.push(op, t))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let t = Tensor {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().map(|v| v * v).collect(),
        };
        self.push(Op::Square(x), t)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.data.len().max(1);
        let m = xv.data.iter().sum::<f64>() / n as f64;
        self.push(Op::MeanAll(x), Tensor::scalar(m))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = self.value(x);
        let t = Tensor {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().map(|v| v * c).collect(),
        };
        self.push(Op::Scale { x, c }, t)
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::Shape("add_scaled: shape mismatch".into()));
        }
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| x + c * y)
            .collect();
        let t = Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        Ok(self.push(Op::AddScaled { a, b, c }, t))
    }

    /// Reverse pass from a scalar loss node. Accumulates parameter gradients
    /// into `params.grad`; input-node gradients stay readable via `grad`.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        if self.backward_done {
            return Err(Error::GraphUsage("backward ran twice on one graph".into()));
        }
        let lv = self.value(loss);
        if lv.rows != 1 || lv.cols != 1 {
            return Err(Error::GraphUsage("backward needs a scalar loss".into()));
        }
        self.backward_done = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        fn gbuf<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], id: NodeId) -> &'g mut Tensor {
            let shape = (nodes[id.0].value.rows, nodes[id.0].value.cols);
            grads[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
        }

        for i in (0..nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Defer re-inserting: some ops need their own output value.
            let op = nodes[i].op.clone();
            match op {
                Op::Input => {}
                Op::Param(pid) => {
                    let target = &mut params.entries[pid.0].grad;
                    if !target.same_shape(&g) {
                        return Err(Error::Shape("parameter gradient shape mismatch".into()));
                    }
                    axpy(&mut target.data, 1.0, &g.data);
                }
                Op::Affine { x, w, b } => {
                    let (n, out) = (g.rows, g.cols);
                    let inner = nodes[x.0].value.cols;
                    // gx[i,k] = dot(g[i,:], w[k,:])
                    {
                        let gx = gbuf(&mut grads, nodes, x);
                        for i2 in 0..n {
                            let grow = g.row(i2);
                            for k in 0..inner {
                                let wrow = nodes[w.0].value.row(k);
                                gx.data[i2 * inner + k] += dot(grow, wrow);
                            }
                        }
                    }
                    // gw[k,:] += x[i,k] * g[i,:]
                    {
                        let gw = gbuf(&mut grads, nodes, w);
                        for i2 in 0..n {
                            let grow = g.row(i2);
                            for k in 0..inner {
                                let xik = nodes[x.0].value.get(i2, k);
                                axpy(&mut gw.data[k * out..(k + 1) * out], xik, grow);
                            }
                        }
                    }
                    // gb += column sums of g
                    {
                        let gb = gbuf(&mut grads, nodes, b);
                        for i2 in 0..n {
                            axpy(&mut gb.data, 1.0, g.row(i2));
                        }
                    }
                }
                Op::Relu(x) => {
                    let mask: Vec<f64> = nodes[i]
                        .value
                        .data
                        .iter()
                        .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
                        .collect();
                    let gx = gbuf(&mut grads, nodes, x);
                    for (k, gv) in g.data.iter().enumerate() {
                        gx.data[k] += gv * mask[k];
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let cols = nodes[p.0].value.cols;
                        let rows = g.rows;
                        let gcols = g.cols;
                        let gp = gbuf(&mut grads, nodes, p);
                        for r in 0..rows {
                            let src = &g.data[r * gcols + at..r * gcols + at + cols];
                            axpy(&mut gp.data[r * cols..(r + 1) * cols], 1.0, src);
                        }
                        at += cols;
                    }
                }
                Op::ExpandRows { x, segments } => {
                    let cols = g.cols;
                    let gx = gbuf(&mut grads, nodes, x);
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        for r in start..start + len {
                            let src = &g.data[r * cols..(r + 1) * cols];
                            axpy(&mut gx.data[s * cols..(s + 1) * cols], 1.0, src);
                        }
                    }
                }
                Op::SegmentMean { x, segments } => {
                    let cols = g.cols;
                    let gx = gbuf(&mut grads, nodes, x);
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        if len == 0 {
                            continue;
                        }
                        let scale = 1.0 / len as f64;
                        let src = &g.data[s * cols..(s + 1) * cols];
                        for r in start..start + len {
                            axpy(&mut gx.data[r * cols..(r + 1) * cols], scale, src);
                        }
                    }
                }
                Op::SegmentSoftmax { logits, segments } => {
                    let y = &nodes[i].value;
                    let mut gl = Tensor::zeros(y.rows, 1);
                    for &(start, len) in &segments {
                        if len == 0 {
                            continue;
                        }
                        let mut inner = 0.0;
                        for r in start..start + len {
                            inner += g.data[r] * y.data[r];
                        }
                        for r in start..start + len {
                            gl.data[r] = y.data[r] * (g.data[r] - inner);
                        }
                    }
                    let gx = gbuf(&mut grads, nodes, logits);
                    axpy(&mut gx.data, 1.0, &gl.data);
                }
                Op::SegmentWeightedSum {
                    x,
                    weights,
                    segments,
                } => {
                    let cols = nodes[x.0].value.cols;
                    {
                        let gx = gbuf(&mut grads, nodes, x);
                        for (s, &(start, len)) in segments.iter().enumerate() {
                            let src = &g.data[s * cols..(s + 1) * cols];
                            for r in start..start + len {
                                let wv = nodes[weights.0].value.data[r];
                                axpy(&mut gx.data[r * cols..(r + 1) * cols], wv, src);
                            }
                        }
                    }
                    {
                        let gw = gbuf(&mut grads, nodes, weights);
                        for (s, &(start, len)) in segments.iter().enumerate() {
                            let src = &g.data[s * cols..(s + 1) * cols];
                            for r in start..start + len {
                                gw.data[r] += dot(nodes[x.0].value.row(r), src);
                            }
                        }
                    }
                }
                Op::SegmentKl { p_ref, q, segments } => {
                    {
                        let gq = gbuf(&mut grads, nodes, q);
                        for (s, &(start, len)) in segments.iter().enumerate() {
                            let gs = g.data[s];
                            for r in start..start + len {
                                let p = nodes[p_ref.0].value.data[r];
                                let qv = nodes[q.0].value.data[r];
                                if p > 0.0 && qv > KL_FLOOR {
                                    gq.data[r] += gs * (-p / qv);
                                }
                            }
                        }
                    }
                    {
                        let gp = gbuf(&mut grads, nodes, p_ref);
                        for (s, &(start, len)) in segments.iter().enumerate() {
                            let gs = g.data[s];
                            for r in start..start + len {
                                let p = nodes[p_ref.0].value.data[r];
                                let qv = nodes[q.0].value.data[r].max(KL_FLOOR);
                                if p > 0.0 {
                                    gp.data[r] += gs * ((p / qv).ln() + 1.0);
                                }
                            }
                        }
                    }
                }
                Op::RowMean(x) => {
                    let cols = nodes[x.0].value.cols;
                    let gx = gbuf(&mut grads, nodes, x);
                    for r in 0..g.rows {
                        let scale = g.data[r] / cols as f64;
                        for v in &mut gx.data[r * cols..(r + 1) * cols] {
                            *v += scale;
                        }
                    }
                }
                Op::AddCol { x, col } | Op::SubCol { x, col } => {
                    let sign = if matches!(nodes[i].op, Op::AddCol { .. }) {
                        1.0
                    } else {
                        -1.0
                    };
                    {
                        let gx = gbuf(&mut grads, nodes, x);
                        axpy(&mut gx.data, 1.0, &g.data);
                    }
                    {
                        let gc = gbuf(&mut grads, nodes, col);
                        for r in 0..g.rows {
                            gc.data[r] += sign * g.row(r).iter().sum::<f64>();
                        }
                    }
                }
                Op::GatherCols { x, idx } => {
                    let cols = nodes[x.0].value.cols;
                    let gx = gbuf(&mut grads, nodes, x);
                    for (r, &c) in idx.iter().enumerate() {
                        gx.data[r * cols + c] += g.data[r];
                    }
                }
                Op::Add { a, b } => {
                    axpy(&mut gbuf(&mut grads, nodes, a).data, 1.0, &g.data);
                    axpy(&mut gbuf(&mut grads, nodes, b).data, 1.0, &g.data);
                }
                Op::Sub { a, b } => {
                    axpy(&mut gbuf(&mut grads, nodes, a).data, 1.0, &g.data);
                    axpy(&mut gbuf(&mut grads, nodes, b).data, -1.0, &g.data);
                }
                Op::Square(x) => {
                    let xv: Vec<f64> = nodes[x.0].value.data.clone();
                    let gx = gbuf(&mut grads, nodes, x);
                    for (k, gv) in g.data.iter().enumerate() {
                        gx.data[k] += 2.0 * xv[k] * gv;
                    }
                }
                Op::MeanAll(x) => {
                    let n = nodes[x.0].value.data.len().max(1);
                    let gx = gbuf(&mut grads, nodes, x);
                    let scale = g.item() / n as f64;
                    for v in &mut gx.data {
                        *v += scale;
                    }
                }
                Op::Scale { x, c } => {
                    axpy(&mut gbuf(&mut grads, nodes, x).data, c, &g.data);
                }
                Op::AddScaled { a, b, c } => {
                    axpy(&mut gbuf(&mut grads, nodes, a).data, 1.0, &g.data);
                    axpy(&mut gbuf(&mut grads, nodes, b).data, c, &g.data);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

// --- optimizer --------------------------------------------------------------

/// Bias-corrected adaptive-moment descent over a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: params
                .entries
                .iter()
                .map(|e| vec![0.0; e.value.data.len()])
                .collect(),
            v: params
                .entries
                .iter()
                .map(|e| vec![0.0; e.value.data.len()])
                .collect(),
        }
    }

    /// One update from the accumulated gradients; gradients are zeroed
    /// afterward. A non-finite gradient rejects the whole update.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for e in &params.entries {
            if !e.grad.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite gradient in '{}'",
                    e.name
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, e) in params.entries.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, g) in e.grad.data.iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                e.value.data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            e.grad.data.fill(0.0);
        }
        Ok(())
    }
}

// --- checkpoints -------------------------------------------------------------
//
// Binary layout:
//
//   dacoop-checkpoint v1\n
//   topology <free-form single line>\n
//   meta config_hash=<hex> seed=<n>\n   (optional)
//   arrays <count>\n
//   array <name> <rows> <cols>\n  followed by rows*cols little-endian f64
//   ... repeated ...
//
// Values round-trip bit-exactly.

const CKPT_MAGIC: &str = "dacoop-checkpoint v1";

pub fn save_checkpoint(params: &ParamSet, topology: &str, path: &Path) -> Result<()> {
    save_checkpoint_meta(params, topology, None, path)
}

/// Save with an optional `(config_hash, seed)` provenance line.
pub fn save_checkpoint_meta(
    params: &ParamSet,
    topology: &str,
    meta: Option<(u64, u64)>,
    path: &Path,
) -> Result<()> {
    if topology.contains('\n') {
        return Err(Error::Checkpoint("topology must be a single line".into()));
    }
    let mut out = Vec::new();
    writeln!(out, "{CKPT_MAGIC}")?;
    writeln!(out, "topology {topology}")?;
    if let Some((hash, seed)) = meta {
        writeln!(out, "meta config_hash={hash:016x} seed={seed}")?;
    }
    writeln!(out, "arrays {}", params.entries.len())?;
    for e in &params.entries {
        writeln!(out, "array {} {} {}", e.name, e.value.rows, e.value.cols)?;
        for v in &e.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, String)> {
    let (params, topology, _) = load_checkpoint_meta(path)?;
    Ok((params, topology))
}

/// Parameter set, topology line, and optional `(config_hash, seed)`
/// provenance of a checkpoint file.
pub type CheckpointContents = (ParamSet, String, Option<(u64, u64)>);

/// Load a checkpoint along with its optional provenance line.
pub fn load_checkpoint_meta(path: &Path) -> Result<CheckpointContents> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let topology = line
        .trim_end()
        .strip_prefix("topology ")
        .ok_or_else(|| bad("missing topology line"))?
        .to_string();
    line.clear();
    reader.read_line(&mut line)?;
    let mut meta = None;
    if let Some(rest) = line.trim_end().strip_prefix("meta ") {
        let mut hash = None;
        let mut seed = None;
        for token in rest.split_whitespace() {
            if let Some(v) = token.strip_prefix("config_hash=") {
                hash = u64::from_str_radix(v, 16).ok();
            } else if let Some(v) = token.strip_prefix("seed=") {
                seed = v.parse().ok();
            }
        }
        meta = match (hash, seed) {
            (Some(h), Some(s)) => Some((h, s)),
            _ => return Err(bad("malformed meta line")),
        };
        line.clear();
        reader.read_line(&mut line)?;
    }
    let count: usize = line
        .trim_end()
        .strip_prefix("arrays ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing arrays line"))?;

    let mut params = ParamSet::new();
    for _ in 0..count {
        line.clear();
        reader.read_line(&mut line)?;
        let mut it = line.trim_end().split(' ');
        if it.next() != Some("array") {
            return Err(bad("missing array header"));
        }
        let name = it.next().ok_or_else(|| bad("array name"))?.to_string();
        let rows: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("array rows"))?;
        let cols: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("array cols"))?;
        let mut buf = vec![0u8; rows * cols * 8];
        reader.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(&name, Tensor::from_rows(rows, cols, data)?)?;
    }
    Ok((params, topology, meta))
}

// --- finite differences -------------------------------------------------------

/// Central-difference gradient of `loss_fn` with respect to every parameter
/// element. Used as the independent oracle for the reverse pass; it never
/// touches `backward`.
pub fn finite_difference_gradients(
    params: &mut ParamSet,
    mut loss_fn: impl FnMut(&ParamSet) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let mut grads = Vec::with_capacity(params.entries.len());
    for k in 0..params.entries.len() {
        let len = params.entries[k].value.data.len();
        let mut g = vec![0.0; len];
        for (j, gj) in g.iter_mut().enumerate() {
            let saved = params.entries[k].value.data[j];
            let h = 5e-6 * saved.abs().max(1.0);
            params.entries[k].value.data[j] = saved + h;
            let up = loss_fn(params)?;
            params.entries[k].value.data[j] = saved - h;
            let down = loss_fn(params)?;
            params.entries[k].value.data[j] = saved;
            *gj = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Worst relative disagreement between analytic and finite-difference
/// gradients, with a small floor so near-zero pairs compare absolutely.
pub fn max_relative_error(analytic: &ParamSet, numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (e, num) in analytic.entries.iter().zip(numeric) {
        for (a, b) in e.grad.data.iter().zip(num) {
            let denom = a.abs().max(b.abs()).max(1e-6);
            worst = worst.max((a - b).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
        Tensor {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.gen_range(-scale..scale))
                .collect(),
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(3, 1, vec![0.0, 0.0, 0.0]).unwrap());
        let y = g.segment_softmax(x, vec![(0, 3)]).unwrap();
        for v in &g.value(y).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_normalizes_and_stays_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..6);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let mut g = Graph::new();
            let x = g.input(Tensor::from_rows(n, 1, logits).unwrap());
            let y = g.segment_softmax(x, vec![(0, n)]).unwrap();
            let sum: f64 = g.value(y).data.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(g.value(y).data.iter().all(|v| *v > 0.0));
        }
        // Max-subtraction keeps huge logits finite and normalized even when
        // the far tail underflows.
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(3, 1, vec![700.0, -700.0, 690.0]).unwrap());
        let y = g.segment_softmax(x, vec![(0, 3)]).unwrap();
        let sum: f64 = g.value(y).data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(g.value(y).data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identity_affine_passes_through() {
        let mut params = ParamSet::new();
        let mut eye = Tensor::zeros(3, 3);
        for i in 0..3 {
            eye.data[i * 3 + i] = 1.0;
        }
        let w = params.add("w", eye).unwrap();
        let b = params.add("b", Tensor::zeros(1, 3)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap());
        let wn = g.param(&params, w);
        let bn = g.param(&params, b);
        let y = g.affine(x, wn, bn).unwrap();
        assert_eq!(g.value(y).data, g.value(x).data);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(1, 2, vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data, vec![0.0, 2.0]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let xn = g.param(&params, x);
        let y = g.square(xn);
        let loss = g.mean_all(y);
        g.backward(loss, &mut params).unwrap();
        assert!((params.grad(x).data[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_is_a_usage_error() {
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::scalar(1.0)).unwrap();
        let mut g = Graph::new();
        let xn = g.param(&params, x);
        let loss = g.mean_all(xn);
        g.backward(loss, &mut params).unwrap();
        assert!(g.backward(loss, &mut params).is_err());
    }

    #[test]
    fn shape_mismatch_fails_at_construction() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::zeros(4, 2)).unwrap();
        let b = params.add("b", Tensor::zeros(1, 2)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(1, 3));
        let wn = g.param(&params, w);
        let bn = g.param(&params, b);
        assert!(g.affine(x, wn, bn).is_err());
    }

    /// Random small composite graph exercising every op on the training
    /// path; analytic gradients must match central finite differences.
    fn build_and_check(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d_in = 2;
        let d_emb = rng.gen_range(3..6);
        let d_hidden = rng.gen_range(3..7);
        let n_actions = 4;
        let w_e = params
            .add("w_e", rand_tensor(&mut rng, d_in, d_emb, 0.8))
            .unwrap();
        let b_e = params
            .add("b_e", rand_tensor(&mut rng, 1, d_emb, 0.3))
            .unwrap();
        let w_k = params
            .add("w_k", rand_tensor(&mut rng, d_emb, d_emb, 0.8))
            .unwrap();
        let b_k = params
            .add("b_k", rand_tensor(&mut rng, 1, d_emb, 0.3))
            .unwrap();
        let w_a = params
            .add("w_a", rand_tensor(&mut rng, 4 + 2 * d_emb, 1, 0.8))
            .unwrap();
        let b_a = params.add("b_a", rand_tensor(&mut rng, 1, 1, 0.3)).unwrap();
        let w_1 = params
            .add("w_1", rand_tensor(&mut rng, 4 + d_emb, d_hidden, 0.8))
            .unwrap();
        let b_1 = params
            .add("b_1", rand_tensor(&mut rng, 1, d_hidden, 0.3))
            .unwrap();
        let w_v = params
            .add("w_v", rand_tensor(&mut rng, d_hidden, 1, 0.8))
            .unwrap();
        let b_v = params.add("b_v", rand_tensor(&mut rng, 1, 1, 0.3)).unwrap();
        let w_adv = params
            .add("w_adv", rand_tensor(&mut rng, d_hidden, n_actions, 0.8))
            .unwrap();
        let b_adv = params
            .add("b_adv", rand_tensor(&mut rng, 1, n_actions, 0.3))
            .unwrap();

        let batch = rng.gen_range(2..5);
        let mut segments: Segments = Vec::new();
        let mut at = 0;
        for _ in 0..batch {
            let len = rng.gen_range(0..4);
            segments.push((at, len));
            at += len;
        }
        let total = at.max(1);
        // Ensure at least one neighbor overall so segment ops have content.
        if at == 0 {
            segments[0] = (0, 1);
        }
        let feats = rand_tensor(&mut rng, total, d_in, 1.0);
        let o_loc = rand_tensor(&mut rng, batch, 4, 1.0);
        let actions: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n_actions)).collect();
        let targets = rand_tensor(&mut rng, batch, 1, 2.0);
        // A fixed reference distribution per neighbor row (normalized per segment).
        let mut p_ref = Tensor::zeros(total, 1);
        for &(start, len) in &segments {
            if len == 0 {
                continue;
            }
            let mut acc = 0.0;
            for r in start..start + len {
                let v: f64 = rng.gen_range(0.1..1.0);
                p_ref.data[r] = v;
                acc += v;
            }
            for r in start..start + len {
                p_ref.data[r] /= acc;
            }
        }
        let c_kl = 0.05;

        let loss_value = |params: &ParamSet| -> Result<f64> {
            let mut g = Graph::new();
            let feats_n = g.input(feats.clone());
            let oloc_n = g.input(o_loc.clone());
            let pref_n = g.input(p_ref.clone());
            let p = |g: &mut Graph, id| g.param(params, id);
            let (w_e_n, b_e_n) = (p(&mut g, w_e), p(&mut g, b_e));
            let (w_k_n, b_k_n) = (p(&mut g, w_k), p(&mut g, b_k));
            let (w_a_n, b_a_n) = (p(&mut g, w_a), p(&mut g, b_a));
            let (w_1_n, b_1_n) = (p(&mut g, w_1), p(&mut g, b_1));
            let (w_v_n, b_v_n) = (p(&mut g, w_v), p(&mut g, b_v));
            let (w_adv_n, b_adv_n) = (p(&mut g, w_adv), p(&mut g, b_adv));

            let e_lin = g.affine(feats_n, w_e_n, b_e_n)?;
            let e = g.relu(e_lin);
            let k_lin = g.affine(e, w_k_n, b_k_n)?;
            let k = g.relu(k_lin);
            let e_m = g.segment_mean(e, segments.clone())?;
            let query = g.concat_cols(&[oloc_n, e_m])?;
            let query_rows = g.expand_rows(query, segments.clone())?;
            let att_in = g.concat_cols(&[query_rows, k])?;
            let logits_lin = g.affine(att_in, w_a_n, b_a_n)?;
            let logits = g.relu(logits_lin);
            let alpha = g.segment_softmax(logits, segments.clone())?;
            let e_i = g.segment_weighted_sum(e, alpha, segments.clone())?;
            let mlp_in = g.concat_cols(&[oloc_n, e_i])?;
            let h_lin = g.affine(mlp_in, w_1_n, b_1_n)?;
            let h = g.relu(h_lin);
            let v = g.affine(h, w_v_n, b_v_n)?;
            let adv = g.affine(h, w_adv_n, b_adv_n)?;
            let adv_mean = g.row_mean(adv);
            let centered = g.sub_col(adv, adv_mean)?;
            let q = g.add_col(centered, v)?;
            let q_sel = g.gather_cols(q, actions.clone())?;
            let t_n = g.input(targets.clone());
            let delta = g.sub(q_sel, t_n)?;
            let sq = g.square(delta);
            let l_td = g.mean_all(sq);
            let kl = g.segment_kl(pref_n, alpha, segments.clone())?;
            let kl_mean = g.mean_all(kl);
            let loss = g.add_scaled(l_td, kl_mean, c_kl)?;
            Ok(g.value(loss).item())
        };

        // Analytic gradients via one backward pass.
        {
            let mut g = Graph::new();
            let feats_n = g.input(feats.clone());
            let oloc_n = g.input(o_loc.clone());
            let pref_n = g.input(p_ref.clone());
            let pp = |g: &mut Graph, id| g.param(&params, id);
            let (w_e_n, b_e_n) = (pp(&mut g, w_e), pp(&mut g, b_e));
            let (w_k_n, b_k_n) = (pp(&mut g, w_k), pp(&mut g, b_k));
            let (w_a_n, b_a_n) = (pp(&mut g, w_a), pp(&mut g, b_a));
            let (w_1_n, b_1_n) = (pp(&mut g, w_1), pp(&mut g, b_1));
            let (w_v_n, b_v_n) = (pp(&mut g, w_v), pp(&mut g, b_v));
            let (w_adv_n, b_adv_n) = (pp(&mut g, w_adv), pp(&mut g, b_adv));
            let e_lin = g.affine(feats_n, w_e_n, b_e_n).unwrap();
            let e = g.relu(e_lin);
            let k_lin = g.affine(e, w_k_n, b_k_n).unwrap();
            let k = g.relu(k_lin);
            let e_m = g.segment_mean(e, segments.clone()).unwrap();
            let query = g.concat_cols(&[oloc_n, e_m]).unwrap();
            let query_rows = g.expand_rows(query, segments.clone()).unwrap();
            let att_in = g.concat_cols(&[query_rows, k]).unwrap();
            let logits_lin = g.affine(att_in, w_a_n, b_a_n).unwrap();
            let logits = g.relu(logits_lin);
            let alpha = g.segment_softmax(logits, segments.clone()).unwrap();
            let e_i = g.segment_weighted_sum(e, alpha, segments.clone()).unwrap();
            let mlp_in = g.concat_cols(&[oloc_n, e_i]).unwrap();
            let h_lin = g.affine(mlp_in, w_1_n, b_1_n).unwrap();
            let h = g.relu(h_lin);
            let v = g.affine(h, w_v_n, b_v_n).unwrap();
            let adv = g.affine(h, w_adv_n, b_adv_n).unwrap();
            let adv_mean = g.row_mean(adv);
            let centered = g.sub_col(adv, adv_mean).unwrap();
            let q = g.add_col(centered, v).unwrap();
            let q_sel = g.gather_cols(q, actions.clone()).unwrap();
            let t_n = g.input(targets.clone());
            let delta = g.sub(q_sel, t_n).unwrap();
            let sq = g.square(delta);
            let l_td = g.mean_all(sq);
            let kl = g.segment_kl(pref_n, alpha, segments.clone()).unwrap();
            let kl_mean = g.mean_all(kl);
            let loss = g.add_scaled(l_td, kl_mean, c_kl).unwrap();
            params.zero_grads();
            g.backward(loss, &mut params).unwrap();
        }

        let numeric = finite_difference_gradients(&mut params, loss_value).unwrap();
        max_relative_error(&params, &numeric)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let err = build_and_check(seed);
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences_directly() {
        // KL(p||softmax(z)) as a function of the logits z.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 4;
        let mut params = ParamSet::new();
        let z = params.add("z", rand_tensor(&mut rng, n, 1, 1.0)).unwrap();
        let p_raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let sum: f64 = p_raw.iter().sum();
        let p = Tensor::from_rows(n, 1, p_raw.iter().map(|v| v / sum).collect()).unwrap();

        let eval = |params: &ParamSet| -> Result<f64> {
            let mut g = Graph::new();
            let zn = g.param(params, z);
            let pn = g.input(p.clone());
            let a = g.segment_softmax(zn, vec![(0, n)])?;
            let kl = g.segment_kl(pn, a, vec![(0, n)])?;
            let loss = g.mean_all(kl);
            Ok(g.value(loss).item())
        };
        {
            let mut g = Graph::new();
            let zn = g.param(&params, z);
            let pn = g.input(p.clone());
            let a = g.segment_softmax(zn, vec![(0, n)]).unwrap();
            let kl = g.segment_kl(pn, a, vec![(0, n)]).unwrap();
            let loss = g.mean_all(kl);
            params.zero_grads();
            g.backward(loss, &mut params).unwrap();
        }
        let numeric = finite_difference_gradients(&mut params, eval).unwrap();
        let err = max_relative_error(&params, &numeric);
        assert!(err < 1e-6, "kl gradient error {err}");
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::scalar(0.5)).unwrap();
        let mut g = Graph::new();
        let xn = g.param(&params, x);
        let loss = g.mean_all(xn); // d loss / dx = 1
        g.backward(loss, &mut params).unwrap();
        let mut adam = AdamState::new(&params, 3e-5);
        adam.step(&mut params).unwrap();
        let delta = 0.5 - params.value(x).data[0];
        assert!((delta - 3e-5).abs() < 3e-5 * 1e-6, "delta {delta}");
        // Gradients were zeroed.
        assert_eq!(params.grad(x).data[0], 0.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::scalar(1.25)).unwrap();
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step(&mut params).unwrap();
        assert_eq!(params.value(x).data[0], 1.25);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = ParamSet::new();
            let x = params
                .add("x", Tensor::from_rows(1, 3, vec![0.1, -0.2, 0.3]).unwrap())
                .unwrap();
            let mut adam = AdamState::new(&params, 1e-2);
            for k in 0..10 {
                let mut g = Graph::new();
                let xn = g.param(&params, x);
                let sq = g.square(xn);
                let loss = g.mean_all(sq);
                let _ = k;
                g.backward(loss, &mut params).unwrap();
                adam.step(&mut params).unwrap();
            }
            params.value(x).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::scalar(1.0)).unwrap();
        params.entries[x.0].grad.data[0] = f64::NAN;
        let mut adam = AdamState::new(&params, 1e-3);
        assert!(adam.step(&mut params).is_err());
        assert_eq!(params.value(x).data[0], 1.0);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        params
            .add("layer.w", rand_tensor(&mut rng, 7, 3, 2.0))
            .unwrap();
        params
            .add("layer.b", rand_tensor(&mut rng, 1, 3, 2.0))
            .unwrap();
        let dir = std::env::temp_dir().join("dacoop_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");
        save_checkpoint(&params, "test w=7x3", &path).unwrap();
        let (back, topo) = load_checkpoint(&path).unwrap();
        assert_eq!(topo, "test w=7x3");
        assert_eq!(back.entries.len(), 2);
        for (a, b) in params.entries.iter().zip(&back.entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data, b.value.data);
        }
    }

    #[test]
    fn checkpoint_meta_round_trips() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::scalar(1.5)).unwrap();
        let dir = std::env::temp_dir().join("dacoop_ckpt_meta_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("meta.ckpt");
        save_checkpoint_meta(&params, "t v1", Some((0xbeef, 42)), &path).unwrap();
        let (back, topo, meta) = load_checkpoint_meta(&path).unwrap();
        assert_eq!(topo, "t v1");
        assert_eq!(meta, Some((0xbeef, 42)));
        assert_eq!(back.value(back.id("w").unwrap()).item(), 1.5);
        // Files without the meta line still load.
        save_checkpoint(&params, "t v1", &path).unwrap();
        let (_, _, meta) = load_checkpoint_meta(&path).unwrap();
        assert_eq!(meta, None);
    }

    #[test]
    fn empty_segments_are_tolerated() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(2, 3, vec![1.0; 6]).unwrap());
        let m = g.segment_mean(x, vec![(0, 2), (2, 0)]).unwrap();
        assert_eq!(g.value(m).rows, 2);
        assert_eq!(g.value(m).row(1), &[0.0, 0.0, 0.0]);
    }
}
