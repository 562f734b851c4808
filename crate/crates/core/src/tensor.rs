//! Dense row-major matrices and a small reverse-mode autodiff tape.
//!
//! Everything is `f64`: the tape is used both for training and for the
//! input-embedding gradients that are checked against finite differences,
//! so single precision is not an option.

use std::borrow::Cow;

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
        assert_eq!(data.len(), rows * cols, "matrix data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `self^T * other`
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions a query row may attend to.
#[derive(Debug, Clone, Default)]
pub struct AttnMask {
    pub causal: bool,
    /// `true` marks a key column that may be attended.
    pub keys: Option<Vec<bool>>,
}

impl AttnMask {
    fn allowed(&self, row: usize, col: usize) -> bool {
        (!self.causal || col <= row) && self.keys.as_ref().is_none_or(|k| k[col])
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, inv_std: Vec<f64> },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    LogSoftmaxPick(Var, Vec<usize>, Mat),
    Sum(Var),
    Exp(Var),
    StopGrad,
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. Leaf values may be borrowed so parameters
/// are not copied for every forward pass.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'a> Default for Graph<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf owning its value.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn leaf_ref(&mut self, value: &'a Mat) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Mat) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::MatMul(a, b), rg)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::Add(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1, "add_row expects a single row");
        assert_eq!(r.cols, self.value(a).cols, "add_row width mismatch");
        let mut v = self.value(a).clone();
        let cols = v.cols;
        for chunk in v.data.chunks_mut(cols) {
            for (x, b) in chunk.iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(Cow::Owned(v), Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale(s);
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::Scale(a, s), rg)
    }

    /// Tanh-approximated GELU; smooth, so finite differences stay well behaved.
    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let v = Mat::from_vec(src.rows, src.cols, data);
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::Gelu(a), rg)
    }

    /// Row-wise softmax; masked entries are exactly zero.
    pub fn softmax(&mut self, a: Var, mask: AttnMask) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros(src.rows, src.cols);
        for r in 0..src.rows {
            let row = src.row(r);
            let mut max = f64::NEG_INFINITY;
            for (c, &x) in row.iter().enumerate() {
                if mask.allowed(r, c) && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let out = v.row_mut(r);
            let mut total = 0.0;
            for (c, &x) in row.iter().enumerate() {
                if mask.allowed(r, c) {
                    let e = (x - max).exp();
                    out[c] = e;
                    total += e;
                }
            }
            out.iter_mut().for_each(|e| *e /= total);
        }
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::Softmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let cols = src.cols;
        let mut v = Mat::zeros(src.rows, cols);
        let mut inv_std = Vec::with_capacity(src.rows);
        for r in 0..src.rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let out = v.row_mut(r);
            for c in 0..cols {
                out[c] = (row[c] - mean) * is * g.data[c] + b.data[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Cow::Owned(v), Op::LayerNorm { x, gain, bias, inv_std }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let src = self.value(a);
        let width = end - start;
        let mut v = Mat::zeros(src.rows, width);
        for r in 0..src.rows {
            v.row_mut(r).copy_from_slice(&src.row(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        self.push(Cow::Owned(v), Op::Gather(table, ids.to_vec()), rg)
    }

    /// Log-softmax of each logits row, picked at `targets[row]`; `rows x 1`.
    pub fn log_softmax_pick(&mut self, logits: Var, targets: &[usize]) -> Var {
        let src = self.value(logits);
        assert_eq!(src.rows, targets.len(), "one target per logits row");
        let mut probs = Mat::zeros(src.rows, src.cols);
        let mut picked = Mat::zeros(src.rows, 1);
        for r in 0..src.rows {
            let row = src.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let p = probs.row_mut(r);
            for (pc, &x) in p.iter_mut().zip(row) {
                *pc = (x - lse).exp();
            }
            picked.data[r] = row[targets[r]] - lse;
        }
        let rg = self.rg(logits);
        self.push(Cow::Owned(picked), Op::LogSoftmaxPick(logits, targets.to_vec(), probs), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).data.iter().sum());
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::Sum(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = Mat::from_vec(src.rows, src.cols, src.data.iter().map(|x| x.exp()).collect());
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::Exp(a), rg)
    }

    /// Identity in the forward pass, blocks every gradient path through it.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(Cow::Owned(v), Op::StopGrad, false)
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::StopGrad => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.matmul_t(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t_matmul(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    // out = a b^T: da = g b, db = g^T a
                    if self.rg(*a) {
                        let ga = g.matmul(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = g.t_matmul(self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let mut gr = Mat::zeros(1, g.cols);
                        for chunk in g.data.chunks(g.cols) {
                            for (acc, v) in gr.data.iter_mut().zip(chunk) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale(*s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, &xv) in ga.data.iter_mut().zip(&x.data) {
                        let inner = GELU_C * (xv + 0.044715 * xv * xv * xv);
                        let t = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                        let d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner;
                        *gv *= d;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = dot(yr, gr);
                        for (c, out) in ga.row_mut(r).iter_mut().enumerate() {
                            *out = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias, inv_std } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let cols = xv.cols;
                    let n = cols as f64;
                    let mut gx = Mat::zeros(xv.rows, cols);
                    let mut ggain = Mat::zeros(1, cols);
                    let mut gbias = Mat::zeros(1, cols);
                    let mut xhat = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..xv.rows {
                        let row = xv.row(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let is = inv_std[r];
                        let gr = g.row(r);
                        for c in 0..cols {
                            xhat[c] = (row[c] - mean) * is;
                            dxhat[c] = gr[c] * gv.data[c];
                            ggain.data[c] += gr[c] * xhat[c];
                            gbias.data[c] += gr[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dot(&dxhat, &xhat) / n;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] = is * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                        }
                    }
                    if self.rg(*gain) {
                        accumulate(&mut grads, *gain, ggain);
                    }
                    if self.rg(*bias) {
                        accumulate(&mut grads, *bias, gbias);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Mat::zeros(src.rows, src.cols);
                    for r in 0..src.rows {
                        ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).cols;
                        if self.rg(p) {
                            let mut gp = Mat::zeros(g.rows, width);
                            for r in 0..g.rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + width]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += width;
                    }
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut gt = Mat::zeros(t.rows, t.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for (acc, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::LogSoftmaxPick(logits, targets, probs) => {
                    let mut gl = Mat::zeros(probs.rows, probs.cols);
                    for r in 0..probs.rows {
                        let gr = g.data[r];
                        let out = gl.row_mut(r);
                        for (o, p) in out.iter_mut().zip(probs.row(r)) {
                            *o = -gr * p;
                        }
                        out[targets[r]] += gr;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    let ga = Mat::from_vec(src.rows, src.cols, vec![g.data[0]; src.rows * src.cols]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let mut ga = g;
                    for (gv, y) in ga.data.iter_mut().zip(&node.value.data) {
                        *gv *= y;
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of the backward output with respect to every leaf that
/// required them.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}
