//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape of operations built during the forward pass;
//! [`Graph::backward`] walks it in reverse and accumulates gradients for
//! every node that (transitively) depends on a parameter leaf. The op set is
//! exactly what the encoders, localization heads and losses need; each
//! backward rule is covered by a finite-difference check in the tests below.

use super::tensor::{matmul, matmul_nt, matmul_tn, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

const NORM_EPS: f64 = 1e-30;
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// `a (M x N) + b (1 x N)` broadcast over rows.
    AddRowBroadcast(NodeId, NodeId),
    /// `a (M x N) ⊙ b (1 x N)` broadcast over rows.
    MulRowBroadcast(NodeId, NodeId),
    /// `a (M x N) - b (M x 1)` broadcast over columns.
    SubColBroadcast(NodeId, NodeId),
    Relu(NodeId),
    Log(NodeId),
    Neg(NodeId),
    SoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MaxOverRows {
        x: NodeId,
        argmax: Vec<usize>,
    },
    SumAll(NodeId),
    SelectEntries {
        x: NodeId,
        entries: Vec<(usize, usize)>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Conv1dSame {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
    },
}

struct Node {
    value: Matrix,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn val(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; gradients do not flow into it.
    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.push(m, false, Op::Leaf)
    }

    /// Trainable input; gradients are accumulated for it.
    pub fn param(&mut self, m: Matrix) -> NodeId {
        self.push(m, true, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.val(a), self.val(b));
        self.push(v, self.needs(a) || self.needs(b), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let mut out = Matrix::zeros(x.cols, x.rows);
        for r in 0..x.rows {
            for c in 0..x.cols {
                out.set(c, r, x.get(r, c));
            }
        }
        self.push(out, self.needs(a), Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "add shapes");
        let v = Matrix {
            rows: self.val(a).rows,
            cols: self.val(a).cols,
            data: self
                .val(a)
                .data
                .iter()
                .zip(&self.val(b).data)
                .map(|(x, y)| x + y)
                .collect(),
        };
        self.push(v, self.needs(a) || self.needs(b), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "sub shapes");
        let v = Matrix {
            rows: self.val(a).rows,
            cols: self.val(a).cols,
            data: self
                .val(a)
                .data
                .iter()
                .zip(&self.val(b).data)
                .map(|(x, y)| x - y)
                .collect(),
        };
        self.push(v, self.needs(a) || self.needs(b), Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "mul shapes");
        let v = Matrix {
            rows: self.val(a).rows,
            cols: self.val(a).cols,
            data: self
                .val(a)
                .data
                .iter()
                .zip(&self.val(b).data)
                .map(|(x, y)| x * y)
                .collect(),
        };
        self.push(v, self.needs(a) || self.needs(b), Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = Matrix {
            rows: self.val(a).rows,
            cols: self.val(a).cols,
            data: self.val(a).data.iter().map(|x| x * c).collect(),
        };
        self.push(v, self.needs(a), Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = Matrix {
            rows: self.val(a).rows,
            cols: self.val(a).cols,
            data: self.val(a).data.iter().map(|x| x + c).collect(),
        };
        self.push(v, self.needs(a), Op::AddScalar(a))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (bm, bn) = self.val(b).shape();
        assert_eq!((bm, bn), (1, self.val(a).cols), "row broadcast shapes");
        let mut v = self.val(a).clone();
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(self.nodes[b.0].value.row(0)) {
                *x += y;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::AddRowBroadcast(a, b))
    }

    pub fn mul_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (bm, bn) = self.val(b).shape();
        assert_eq!((bm, bn), (1, self.val(a).cols), "row broadcast shapes");
        let mut v = self.val(a).clone();
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(self.nodes[b.0].value.row(0)) {
                *x *= y;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::MulRowBroadcast(a, b))
    }

    pub fn sub_col_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (bm, bn) = self.val(b).shape();
        assert_eq!((bm, bn), (self.val(a).rows, 1), "col broadcast shapes");
        let mut v = self.val(a).clone();
        for r in 0..v.rows {
            let s = self.nodes[b.0].value.get(r, 0);
            for x in v.row_mut(r) {
                *x -= s;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::SubColBroadcast(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = Matrix {
            rows: self.val(a).rows,
            cols: self.val(a).cols,
            data: self.val(a).data.iter().map(|x| x.max(0.0)).collect(),
        };
        self.push(v, self.needs(a), Op::Relu(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = Matrix {
            rows: self.val(a).rows,
            cols: self.val(a).cols,
            data: self.val(a).data.iter().map(|x| x.ln()).collect(),
        };
        self.push(v, self.needs(a), Op::Log(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = Matrix {
            rows: self.val(a).rows,
            cols: self.val(a).cols,
            data: self.val(a).data.iter().map(|x| -x).collect(),
        };
        self.push(v, self.needs(a), Op::Neg(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let mut v = Matrix::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &xi) in v.row_mut(r).iter_mut().zip(row) {
                *o = (xi - m).exp();
                sum += *o;
            }
            for o in v.row_mut(r) {
                *o /= sum;
            }
        }
        self.push(v, self.needs(a), Op::SoftmaxRows(a))
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let mut v = Matrix::zeros(x.rows, 1);
        for r in 0..x.rows {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&xi| (xi - m).exp()).sum();
            v.set(r, 0, m + sum.ln());
        }
        self.push(v, self.needs(a), Op::LogSumExpRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xm = self.val(x);
        let n = xm.cols as f64;
        assert_eq!(self.val(gamma).shape(), (1, xm.cols), "gamma shape");
        assert_eq!(self.val(beta).shape(), (1, xm.cols), "beta shape");
        let mut xhat = Matrix::zeros(xm.rows, xm.cols);
        let mut inv_std = Vec::with_capacity(xm.rows);
        for r in 0..xm.rows {
            let row = xm.row(r);
            let mu: f64 = row.iter().sum::<f64>() / n;
            let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mu) * istd;
            }
            inv_std.push(istd);
        }
        let mut out = xhat.clone();
        {
            let g = self.val(gamma).row(0).to_vec();
            let b = self.val(beta).row(0).to_vec();
            for r in 0..out.rows {
                for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                    *o = *o * g[c] + b[c];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            needs,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Normalize each row to unit L2 norm. Zero rows stay zero and receive
    /// zero gradient.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xm = self.val(x);
        let mut out = Matrix::zeros(xm.rows, xm.cols);
        let mut norms = Vec::with_capacity(xm.rows);
        for r in 0..xm.rows {
            let row = xm.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            if norm > NORM_EPS {
                for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        self.push(out, self.needs(x), Op::L2NormalizeRows { x, norms })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.val(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.val(p).cols).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let pm = self.val(p);
            assert_eq!(pm.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pm.cols].copy_from_slice(pm.row(r));
            }
            offset += pm.cols;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, needs, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.val(parts[0]).cols;
        let total: usize = parts.iter().map(|&p| self.val(p).rows).sum();
        let mut out = Matrix::zeros(total, cols);
        let mut offset = 0;
        for &p in parts {
            let pm = self.val(p);
            assert_eq!(pm.cols, cols, "concat_rows col mismatch");
            out.data[offset * cols..(offset + pm.rows) * cols].copy_from_slice(&pm.data);
            offset += pm.rows;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, needs, Op::ConcatRows(parts.to_vec()))
    }

    /// Column-wise max over all rows, producing a 1 x cols vector.
    pub fn max_over_rows(&mut self, x: NodeId) -> NodeId {
        let xm = self.val(x);
        let mut out = Matrix::zeros(1, xm.cols);
        let mut argmax = vec![0usize; xm.cols];
        for c in 0..xm.cols {
            let mut best = xm.get(0, c);
            for r in 1..xm.rows {
                let v = xm.get(r, c);
                if v > best {
                    best = v;
                    argmax[c] = r;
                }
            }
            out.set(0, c, best);
        }
        self.push(out, self.needs(x), Op::MaxOverRows { x, argmax })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Matrix::scalar(self.val(x).data.iter().sum());
        self.push(v, self.needs(x), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.val(x).data.len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Gather entries `(r, c)` into a k x 1 column.
    pub fn select_entries(&mut self, x: NodeId, entries: Vec<(usize, usize)>) -> NodeId {
        let xm = self.val(x);
        let mut out = Matrix::zeros(entries.len(), 1);
        for (i, &(r, c)) in entries.iter().enumerate() {
            out.set(i, 0, xm.get(r, c));
        }
        self.push(out, self.needs(x), Op::SelectEntries { x, entries })
    }

    /// Rows `start..start+len` of `x`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xm = self.val(x);
        assert!(start + len <= xm.rows, "slice out of range");
        let out = Matrix {
            rows: len,
            cols: xm.cols,
            data: xm.data[start * xm.cols..(start + len) * xm.cols].to_vec(),
        };
        self.push(out, self.needs(x), Op::SliceRows { x, start })
    }

    /// Same-padded 1D convolution along rows (time). `x` is T x Cin, `w` is
    /// Cout x (Cin * k), `b` is 1 x Cout; output is T x Cout.
    pub fn conv1d_same(&mut self, x: NodeId, w: NodeId, b: NodeId, kernel: usize) -> NodeId {
        assert!(kernel % 2 == 1, "conv kernel must be odd");
        let xm = self.val(x);
        let wm = self.val(w);
        let bm = self.val(b);
        let (t, cin) = xm.shape();
        let cout = wm.rows;
        assert_eq!(wm.cols, cin * kernel, "conv weight shape");
        assert_eq!(bm.shape(), (1, cout), "conv bias shape");
        let pad = kernel / 2;
        let mut out = Matrix::zeros(t, cout);
        for ti in 0..t {
            let out_row = out.row_mut(ti);
            for (o, slot) in out_row.iter_mut().enumerate() {
                let w_row = wm.row(o);
                let mut acc = bm.get(0, o);
                for j in 0..kernel {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let x_row = xm.row(src as usize);
                    for c in 0..cin {
                        acc += x_row[c] * w_row[c * kernel + j];
                    }
                }
                *slot = acc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, needs, Op::Conv1dSame { x, w, b, kernel })
    }

    /// Backpropagate from a scalar loss node; returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.val(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.accumulate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        let add_to = |grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, d) in existing.data.iter_mut().zip(&delta.data) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    add_to(grads, *a, matmul_nt(gy, self.val(*b)));
                }
                if self.needs(*b) {
                    add_to(grads, *b, matmul_tn(self.val(*a), gy));
                }
            }
            Op::Transpose(a) => {
                let mut d = Matrix::zeros(gy.cols, gy.rows);
                for r in 0..gy.rows {
                    for c in 0..gy.cols {
                        d.set(c, r, gy.get(r, c));
                    }
                }
                add_to(grads, *a, d);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, gy.clone());
                add_to(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, gy.clone());
                let d = Matrix {
                    rows: gy.rows,
                    cols: gy.cols,
                    data: gy.data.iter().map(|v| -v).collect(),
                };
                add_to(grads, *b, d);
            }
            Op::MulElem(a, b) => {
                if self.needs(*a) {
                    let d = Matrix {
                        rows: gy.rows,
                        cols: gy.cols,
                        data: gy
                            .data
                            .iter()
                            .zip(&self.val(*b).data)
                            .map(|(g, v)| g * v)
                            .collect(),
                    };
                    add_to(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = Matrix {
                        rows: gy.rows,
                        cols: gy.cols,
                        data: gy
                            .data
                            .iter()
                            .zip(&self.val(*a).data)
                            .map(|(g, v)| g * v)
                            .collect(),
                    };
                    add_to(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                let d = Matrix {
                    rows: gy.rows,
                    cols: gy.cols,
                    data: gy.data.iter().map(|v| v * c).collect(),
                };
                add_to(grads, *a, d);
            }
            Op::AddScalar(a) => add_to(grads, *a, gy.clone()),
            Op::AddRowBroadcast(a, b) => {
                add_to(grads, *a, gy.clone());
                if self.needs(*b) {
                    let mut d = Matrix::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        for (o, g) in d.row_mut(0).iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                    add_to(grads, *b, d);
                }
            }
            Op::MulRowBroadcast(a, b) => {
                if self.needs(*a) {
                    let bv = self.val(*b).row(0).to_vec();
                    let mut d = gy.clone();
                    for r in 0..d.rows {
                        for (x, y) in d.row_mut(r).iter_mut().zip(&bv) {
                            *x *= y;
                        }
                    }
                    add_to(grads, *a, d);
                }
                if self.needs(*b) {
                    let av = self.val(*a);
                    let mut d = Matrix::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        for c in 0..gy.cols {
                            d.data[c] += gy.get(r, c) * av.get(r, c);
                        }
                    }
                    add_to(grads, *b, d);
                }
            }
            Op::SubColBroadcast(a, b) => {
                add_to(grads, *a, gy.clone());
                if self.needs(*b) {
                    let mut d = Matrix::zeros(gy.rows, 1);
                    for r in 0..gy.rows {
                        d.set(r, 0, -gy.row(r).iter().sum::<f64>());
                    }
                    add_to(grads, *b, d);
                }
            }
            Op::Relu(a) => {
                let d = Matrix {
                    rows: gy.rows,
                    cols: gy.cols,
                    data: gy
                        .data
                        .iter()
                        .zip(&self.val(*a).data)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                };
                add_to(grads, *a, d);
            }
            Op::Log(a) => {
                let d = Matrix {
                    rows: gy.rows,
                    cols: gy.cols,
                    data: gy
                        .data
                        .iter()
                        .zip(&self.val(*a).data)
                        .map(|(g, v)| g / v)
                        .collect(),
                };
                add_to(grads, *a, d);
            }
            Op::Neg(a) => {
                let d = Matrix {
                    rows: gy.rows,
                    cols: gy.cols,
                    data: gy.data.iter().map(|v| -v).collect(),
                };
                add_to(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut d = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let dot: f64 = gy.row(r).iter().zip(y.row(r)).map(|(g, v)| g * v).sum();
                    for (o, (g, v)) in d.row_mut(r).iter_mut().zip(gy.row(r).iter().zip(y.row(r)))
                    {
                        *o = v * (g - dot);
                    }
                }
                add_to(grads, *a, d);
            }
            Op::LogSumExpRows(a) => {
                let x = self.val(*a);
                let y = &self.nodes[i].value;
                let mut d = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let g = gy.get(r, 0);
                    let lse = y.get(r, 0);
                    for (o, &xv) in d.row_mut(r).iter_mut().zip(x.row(r)) {
                        *o = g * (xv - lse).exp();
                    }
                }
                add_to(grads, *a, d);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = xhat.cols as f64;
                let gm = self.val(*gamma);
                if self.needs(*gamma) {
                    let mut dg = Matrix::zeros(1, xhat.cols);
                    for r in 0..xhat.rows {
                        for c in 0..xhat.cols {
                            dg.data[c] += gy.get(r, c) * xhat.get(r, c);
                        }
                    }
                    add_to(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    let mut db = Matrix::zeros(1, xhat.cols);
                    for r in 0..xhat.rows {
                        for c in 0..xhat.cols {
                            db.data[c] += gy.get(r, c);
                        }
                    }
                    add_to(grads, *beta, db);
                }
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(xhat.rows, xhat.cols);
                    for r in 0..xhat.rows {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..xhat.cols {
                            let dxh = gy.get(r, c) * gm.get(0, c);
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat.get(r, c);
                        }
                        mean_dxhat /= n;
                        mean_dxhat_xhat /= n;
                        for c in 0..xhat.cols {
                            let dxh = gy.get(r, c) * gm.get(0, c);
                            dx.set(
                                r,
                                c,
                                inv_std[r] * (dxh - mean_dxhat - xhat.get(r, c) * mean_dxhat_xhat),
                            );
                        }
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &self.nodes[i].value;
                let mut d = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    if norms[r] <= NORM_EPS {
                        continue;
                    }
                    let dot: f64 = gy.row(r).iter().zip(y.row(r)).map(|(g, v)| g * v).sum();
                    for (o, (g, v)) in d.row_mut(r).iter_mut().zip(gy.row(r).iter().zip(y.row(r)))
                    {
                        *o = (g - v * dot) / norms[r];
                    }
                }
                add_to(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.val(p).cols;
                    if self.needs(p) {
                        let mut d = Matrix::zeros(gy.rows, cols);
                        for r in 0..gy.rows {
                            d.row_mut(r).copy_from_slice(&gy.row(r)[offset..offset + cols]);
                        }
                        add_to(grads, p, d);
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.val(p).rows;
                    if self.needs(p) {
                        let d = Matrix {
                            rows,
                            cols: gy.cols,
                            data: gy.data[offset * gy.cols..(offset + rows) * gy.cols].to_vec(),
                        };
                        add_to(grads, p, d);
                    }
                    offset += rows;
                }
            }
            Op::MaxOverRows { x, argmax } => {
                let xm = self.val(*x);
                let mut d = Matrix::zeros(xm.rows, xm.cols);
                for c in 0..xm.cols {
                    d.set(argmax[c], c, gy.get(0, c));
                }
                add_to(grads, *x, d);
            }
            Op::SumAll(x) => {
                let xm = self.val(*x);
                let g = gy.item();
                let d = Matrix {
                    rows: xm.rows,
                    cols: xm.cols,
                    data: vec![g; xm.rows * xm.cols],
                };
                add_to(grads, *x, d);
            }
            Op::SelectEntries { x, entries } => {
                let xm = self.val(*x);
                let mut d = Matrix::zeros(xm.rows, xm.cols);
                for (k, &(r, c)) in entries.iter().enumerate() {
                    d.data[r * xm.cols + c] += gy.get(k, 0);
                }
                add_to(grads, *x, d);
            }
            Op::SliceRows { x, start } => {
                let xm = self.val(*x);
                let mut d = Matrix::zeros(xm.rows, xm.cols);
                d.data[start * xm.cols..(start + gy.rows) * xm.cols].copy_from_slice(&gy.data);
                add_to(grads, *x, d);
            }
            Op::Conv1dSame { x, w, b, kernel } => {
                let xm = self.val(*x);
                let wm = self.val(*w);
                let (t, cin) = xm.shape();
                let cout = wm.rows;
                let pad = kernel / 2;
                if self.needs(*b) {
                    let mut db = Matrix::zeros(1, cout);
                    for ti in 0..t {
                        for (o, g) in db.row_mut(0).iter_mut().zip(gy.row(ti)) {
                            *o += g;
                        }
                    }
                    add_to(grads, *b, db);
                }
                if self.needs(*w) {
                    let mut dw = Matrix::zeros(cout, cin * kernel);
                    for ti in 0..t {
                        let g_row = gy.row(ti);
                        for j in 0..*kernel {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let x_row = xm.row(src as usize);
                            for (o, &g) in g_row.iter().enumerate() {
                                let dw_row = dw.row_mut(o);
                                for c in 0..cin {
                                    dw_row[c * kernel + j] += g * x_row[c];
                                }
                            }
                        }
                    }
                    add_to(grads, *w, dw);
                }
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(t, cin);
                    for ti in 0..t {
                        let g_row = gy.row(ti);
                        for j in 0..*kernel {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let dx_row = dx.row_mut(src as usize);
                            for (o, &g) in g_row.iter().enumerate() {
                                let w_row = wm.row(o);
                                for c in 0..cin {
                                    dx_row[c] += g * w_row[c * kernel + j];
                                }
                            }
                        }
                    }
                    add_to(grads, *x, dx);
                }
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}
