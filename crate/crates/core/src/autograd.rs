//! A small reverse-mode autodiff tape over dense row-major matrices.
//!
//! Parameters live in one flat `f64` buffer described by a [`ParamLayout`].
//! A [`Tape`] records a forward computation; [`Tape::backward`] takes seed
//! gradients for any number of output nodes and returns the gradient with
//! respect to the flat parameter buffer. The tape is never mutated by a
//! backward pass, so several backward passes can reuse one forward pass.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut c = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// `a * b^T`
fn matmul_t(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_t shape mismatch");
    let mut c = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            c.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a^T * b`
fn t_matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "t_matmul shape mismatch");
    let mut c = Mat::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let brow = b.row(i);
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c.data[k * b.cols..(k + 1) * b.cols];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

fn softmax_row_in_place(row: &mut [f64], valid: usize) {
    let max = row[..valid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row[..valid].iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row[..valid].iter_mut() {
        *v /= sum;
    }
    for v in row[valid..].iter_mut() {
        *v = 0.0;
    }
}

/// Row-wise softmax of a plain slice; used outside the tape for logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    let n = out.len();
    softmax_row_in_place(&mut out, n);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±scale / sqrt(rows)`.
    FanIn(f64),
    /// Uniform in `±scale`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub init: Init,
}

/// Named matrices packed into one flat buffer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
}

pub type ParamId = usize;

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamId {
        let id = self.specs.len();
        self.specs.push(ParamSpec { name: name.into(), rows, cols, offset: self.total, init });
        self.total += rows * cols;
        id
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id]
    }
}

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize),
    Row(NodeId, usize),
    StackRows(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
}

struct Node {
    value: Mat,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

pub struct Tape<'a> {
    params: &'a [f64],
    layout: &'a ParamLayout,
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a [f64], layout: &'a ParamLayout) -> Self {
        assert_eq!(params.len(), layout.total(), "parameter buffer does not match layout");
        Self { params, layout, param_nodes: vec![None; layout.specs().len()], nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Input)
    }

    /// The node holding parameter `id`; created once per tape.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id] {
            return n;
        }
        let s = self.layout.spec(id);
        let m = Mat::from_vec(s.rows, s.cols, self.params[s.offset..s.offset + s.rows * s.cols].to_vec());
        let n = self.push(m, Op::Param(id));
        self.param_nodes[id] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_t(self.value(a), self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "elementwise shape mismatch");
        Mat::from_vec(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect())
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Mat {
        let x = self.value(a);
        Mat::from_vec(x.rows, x.cols, x.data.iter().map(|v| f(*v)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the single-row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (x, b) = (self.value(a), self.value(bias));
        assert!(b.rows == 1 && b.cols == x.cols, "add_row expects a 1 x cols bias");
        let mut v = x.clone();
        for r in 0..v.rows {
            for (o, bv) in v.row_mut(r).iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Row-wise softmax. With `causal`, row `i` only sees columns `0..=i`.
    pub fn softmax_rows(&mut self, a: NodeId, causal: bool) -> NodeId {
        let mut v = self.value(a).clone();
        let cols = v.cols;
        for r in 0..v.rows {
            let valid = if causal { (r + 1).min(cols) } else { cols };
            softmax_row_in_place(v.row_mut(r), valid);
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows, y.rows, "concat_cols row mismatch");
        let cols = x.cols + y.cols;
        let mut data = Vec::with_capacity(x.rows * cols);
        for r in 0..x.rows {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let v = Mat::from_vec(x.rows, cols, data);
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let v = Mat::from_vec(x.rows, len, data);
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn row(&mut self, a: NodeId, r: usize) -> NodeId {
        let x = self.value(a);
        let v = Mat::from_vec(1, x.cols, x.row(r).to_vec());
        self.push(v, Op::Row(a, r))
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> NodeId {
        assert!(!rows.is_empty(), "stack_rows needs at least one row");
        let cols = self.value(rows[0]).cols;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let m = self.value(r);
            assert!(m.rows == 1 && m.cols == cols, "stack_rows expects 1 x cols rows");
            data.extend_from_slice(&m.data);
        }
        let v = Mat::from_vec(rows.len(), cols, data);
        self.push(v, Op::StackRows(rows.to_vec()))
    }

    /// Rows `ids` of `table` (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &i in ids {
            assert!(i < t.rows, "gather index {i} out of range {}", t.rows);
            data.extend_from_slice(t.row(i));
        }
        let v = Mat::from_vec(ids.len(), t.cols, data);
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xm = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = xm.cols;
        let mut out = Mat::zeros(xm.rows, n);
        let mut xhat = vec![0.0; xm.rows * n];
        let mut inv_std = vec![0.0; xm.rows];
        for r in 0..xm.rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out.data[r * n + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Propagates the seed gradients back to the parameters.
    pub fn backward(&self, seeds: &[(NodeId, &Mat)]) -> Vec<f64> {
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        for (id, g) in seeds {
            let v = &self.nodes[*id].value;
            assert_eq!((v.rows, v.cols), (g.rows, g.cols), "seed gradient shape mismatch");
            accumulate(&mut grads, *id, (*g).clone());
        }
        let mut out = vec![0.0; self.params.len()];
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let s = self.layout.spec(*pid);
                    for (o, v) in out[s.offset..s.offset + g.data.len()].iter_mut().zip(&g.data) {
                        *o += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = matmul_t(&g, self.value(*b));
                    let db = t_matmul(self.value(*a), &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = matmul(&g, self.value(*b));
                    let db = t_matmul(&g, self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let neg = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|v| -v).collect());
                    accumulate(&mut grads, *b, neg);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let da = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect());
                    let db = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect());
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in db.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let d = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * s).collect());
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&y.data).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect());
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&y.data).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect());
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&x.data).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect());
                    accumulate(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols;
                    let bc = self.value(*b).cols;
                    let mut da = Mat::zeros(g.rows, ac);
                    let mut db = Mat::zeros(g.rows, bc);
                    for r in 0..g.rows {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut d = Mat::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Row(a, r) => {
                    let src = self.value(*a);
                    let mut d = Mat::zeros(src.rows, src.cols);
                    d.row_mut(*r).copy_from_slice(&g.data);
                    accumulate(&mut grads, *a, d);
                }
                Op::StackRows(rows) => {
                    for (i, &rid) in rows.iter().enumerate() {
                        accumulate(&mut grads, rid, Mat::from_vec(1, g.cols, g.row(i).to_vec()));
                    }
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut d = Mat::zeros(t.rows, t.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gm = self.value(*gain);
                    let n = g.cols;
                    let mut dx = Mat::zeros(g.rows, n);
                    let mut dgain = Mat::zeros(1, n);
                    let mut dbias = Mat::zeros(1, n);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..n {
                            dgain.data[c] += gr[c] * xh[c];
                            dbias.data[c] += gr[c];
                            let dxh = gr[c] * gm.data[c];
                            sum_d += dxh;
                            sum_dx += dxh * xh[c];
                        }
                        let k = inv_std[r] / n as f64;
                        for c in 0..n {
                            let dxh = gr[c] * gm.data[c];
                            dx.data[r * n + c] = k * (n as f64 * dxh - sum_d - xh[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
