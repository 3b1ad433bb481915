//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is a row-major 2D matrix of f64 (scalars are 1x1). Operations
//! are recorded on a [`Tape`]; [`Tape::backward`] replays it in reverse and
//! accumulates gradients for every node, so parameters, activations, and
//! constants are all plain tape nodes. One tape is single-threaded; build a
//! fresh tape per forward/backward pass.

use crate::{Error, Result};

/// Row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// A 1 x n row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single element of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.rows * self.cols != 1 {
            return Err(Error::Contract(format!(
                "item() on a {}x{} tensor",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn shape_vec(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowBroadcast(usize, usize),
    MulRowBroadcast(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Relu(usize),
    SoftmaxRows(usize),
    LayerNormRows(usize),
    MeanRows(usize),
    L2NormalizeRows(usize),
    LogSumExpRows(usize),
    TakeDiag(usize),
    Log(usize, f64),
    Exp(usize),
    SumAll(usize),
    MeanAll(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    /// Per-row saved factors some backward rules need (layer-norm inverse
    /// stddev, l2 row norms).
    aux: Vec<f64>,
}

/// Records primitive operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tape node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient with respect to `v`; zero if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The current value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Registers an input tensor (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, Vec::new())
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value, aux });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &str, a: Var, b: Var) -> Error {
        Error::Shape {
            op: op.to_string(),
            lhs: self.nodes[a.0].value.shape_vec(),
            rhs: self.nodes[b.0].value.shape_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.nodes[a.0].value.shape();
        let (br, bc) = self.nodes[b.0].value.shape();
        if ac != br {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = Tensor::zeros(ar, bc);
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..ar {
                for k in 0..ac {
                    let aik = av.data[i * ac + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv.data[k * bc..(k + 1) * bc];
                    let orow = &mut out.data[i * bc..(i + 1) * bc];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aik * bv;
                    }
                }
            }
        }
        Ok(self.push(Op::Matmul(a.0, b.0), out, Vec::new()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(v.cols, v.rows);
        for i in 0..v.rows {
            for j in 0..v.cols {
                out.data[j * v.rows + i] = v.data[i * v.cols + j];
            }
        }
        self.push(Op::Transpose(a.0), out, Vec::new())
    }

    fn elementwise(&mut self, name: &str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a.0, b.0), out, Vec::new()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.0, b.0), out, Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.0, b.0), out, Vec::new()))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor {
            rows: v.rows,
            cols: v.cols,
            data: v.data.iter().map(|&x| x * s).collect(),
        };
        self.push(Op::Scale(a.0, s), out, Vec::new())
    }

    /// Adds a 1 x d row vector to every row of an N x d matrix.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[row.0].value;
        if rv.rows != 1 || rv.cols != av.cols {
            return Err(self.shape_err("add_row_broadcast", a, row));
        }
        let mut out = av.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += rv.data[c];
            }
        }
        Ok(self.push(Op::AddRowBroadcast(a.0, row.0), out, Vec::new()))
    }

    /// Multiplies every row of an N x d matrix elementwise by a 1 x d vector.
    pub fn mul_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[row.0].value;
        if rv.rows != 1 || rv.cols != av.cols {
            return Err(self.shape_err("mul_row_broadcast", a, row));
        }
        let mut out = av.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] *= rv.data[c];
            }
        }
        Ok(self.push(Op::MulRowBroadcast(a.0, row.0), out, Vec::new()))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let cols = self.nodes[parts[0].0].value.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols != cols {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
            rows += v.rows;
            data.extend_from_slice(&v.data);
        }
        let out = Tensor { rows, cols, data };
        Ok(self.push(
            Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
            out,
            Vec::new(),
        ))
    }

    /// Rows `start .. start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if start + len > v.rows {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} of a {}-row matrix",
                start + len,
                v.rows
            )));
        }
        let out = Tensor {
            rows: len,
            cols: v.cols,
            data: v.data[start * v.cols..(start + len) * v.cols].to_vec(),
        };
        Ok(self.push(Op::SliceRows(a.0, start), out, Vec::new()))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows;
        let mut cols = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            cols += v.cols;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + v.cols]
                    .copy_from_slice(&v.data[r * v.cols..(r + 1) * v.cols]);
            }
            offset += v.cols;
        }
        Ok(self.push(
            Op::ConcatCols(parts.iter().map(|v| v.0).collect()),
            out,
            Vec::new(),
        ))
    }

    /// Columns `start .. start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if start + len > v.cols {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} of a {}-column matrix",
                start + len,
                v.cols
            )));
        }
        let mut out = Tensor::zeros(v.rows, len);
        for r in 0..v.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&v.data[r * v.cols + start..r * v.cols + start + len]);
        }
        Ok(self.push(Op::SliceCols(a.0, start), out, Vec::new()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor {
            rows: v.rows,
            cols: v.cols,
            data: v.data.iter().map(|&x| x.max(0.0)).collect(),
        };
        self.push(Op::Relu(a.0), out, Vec::new())
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = v.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a.0), out, Vec::new())
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + 1e-5)`, no affine.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = v.clone();
        let mut aux = Vec::with_capacity(out.rows);
        let n = out.cols as f64;
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv_std;
            }
            aux.push(inv_std);
        }
        self.push(Op::LayerNormRows(a.0), out, aux)
    }

    /// Column means: N x d to 1 x d.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(1, v.cols);
        for r in 0..v.rows {
            for c in 0..v.cols {
                out.data[c] += v.data[r * v.cols + c];
            }
        }
        for x in out.data.iter_mut() {
            *x /= v.rows as f64;
        }
        self.push(Op::MeanRows(a.0), out, Vec::new())
    }

    /// Scales each row to unit L2 norm. Errors on a near-zero row.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let mut out = v.clone();
        let mut aux = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric(format!(
                    "l2_normalize of row {r} with norm {norm:e}"
                )));
            }
            for x in row.iter_mut() {
                *x /= norm;
            }
            aux.push(norm);
        }
        Ok(self.push(Op::L2NormalizeRows(a.0), out, aux))
    }

    /// Row-wise log-sum-exp with max-subtraction: N x M to N x 1.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(v.rows, 1);
        for r in 0..v.rows {
            let row = v.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            out.data[r] = max + sum.ln();
        }
        self.push(Op::LogSumExpRows(a.0), out, Vec::new())
    }

    /// Main diagonal of a square matrix as N x 1.
    pub fn take_diag(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.rows != v.cols {
            return Err(Error::Contract(format!(
                "take_diag of a {}x{} matrix",
                v.rows, v.cols
            )));
        }
        let out = Tensor {
            rows: v.rows,
            cols: 1,
            data: (0..v.rows).map(|i| v.data[i * v.cols + i]).collect(),
        };
        Ok(self.push(Op::TakeDiag(a.0), out, Vec::new()))
    }

    /// Elementwise `ln(max(x, floor))`; entries at or below the floor get zero
    /// gradient.
    pub fn log(&mut self, a: Var, floor: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor {
            rows: v.rows,
            cols: v.cols,
            data: v.data.iter().map(|&x| x.max(floor).ln()).collect(),
        };
        self.push(Op::Log(a.0, floor), out, Vec::new())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor {
            rows: v.rows,
            cols: v.cols,
            data: v.data.iter().map(|&x| x.exp()).collect(),
        };
        self.push(Op::Exp(a.0), out, Vec::new())
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor::scalar(v.data.iter().sum());
        self.push(Op::SumAll(a.0), out, Vec::new())
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor::scalar(v.data.iter().sum::<f64>() / v.data.len() as f64);
        self.push(Op::MeanAll(a.0), out, Vec::new())
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
    /// at fan-out; nodes that do not reach the loss get zero.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward from a {}x{} tensor; loss must be scalar",
                lv.rows, lv.cols
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Grads {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn add_grad(grads: &mut [Option<Tensor>], idx: usize, shape: (usize, usize), f: impl FnOnce(&mut Tensor)) {
        let slot = grads[idx].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
        f(slot);
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                // dA = g . B^T
                Self::add_grad(grads, *a, av.shape(), |da| {
                    for r in 0..av.rows {
                        for k in 0..av.cols {
                            let mut s = 0.0;
                            for c in 0..bv.cols {
                                s += g.data[r * bv.cols + c] * bv.data[k * bv.cols + c];
                            }
                            da.data[r * av.cols + k] += s;
                        }
                    }
                });
                // dB = A^T . g
                Self::add_grad(grads, *b, bv.shape(), |db| {
                    for r in 0..av.rows {
                        for k in 0..av.cols {
                            let ark = av.data[r * av.cols + k];
                            if ark == 0.0 {
                                continue;
                            }
                            for c in 0..bv.cols {
                                db.data[k * bv.cols + c] += ark * g.data[r * bv.cols + c];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let av = &self.nodes[*a].value;
                Self::add_grad(grads, *a, av.shape(), |da| {
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            da.data[c * g.rows + r] += g.data[r * g.cols + c];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for &p in [a, b] {
                    let shape = self.nodes[p].value.shape();
                    Self::add_grad(grads, p, shape, |d| {
                        for (x, &gx) in d.data.iter_mut().zip(&g.data) {
                            *x += gx;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                let sa = self.nodes[*a].value.shape();
                Self::add_grad(grads, *a, sa, |d| {
                    for (x, &gx) in d.data.iter_mut().zip(&g.data) {
                        *x += gx;
                    }
                });
                let sb = self.nodes[*b].value.shape();
                Self::add_grad(grads, *b, sb, |d| {
                    for (x, &gx) in d.data.iter_mut().zip(&g.data) {
                        *x -= gx;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.clone();
                let bv = &self.nodes[*b].value;
                Self::add_grad(grads, *a, av.shape(), |d| {
                    for ((x, &gx), &y) in d.data.iter_mut().zip(&g.data).zip(&bv.data) {
                        *x += gx * y;
                    }
                });
                Self::add_grad(grads, *b, bv.shape(), |d| {
                    for ((x, &gx), &y) in d.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *x += gx * y;
                    }
                });
            }
            Op::Scale(a, s) => {
                let shape = self.nodes[*a].value.shape();
                Self::add_grad(grads, *a, shape, |d| {
                    for (x, &gx) in d.data.iter_mut().zip(&g.data) {
                        *x += gx * s;
                    }
                });
            }
            Op::AddRowBroadcast(a, row) => {
                let sa = self.nodes[*a].value.shape();
                Self::add_grad(grads, *a, sa, |d| {
                    for (x, &gx) in d.data.iter_mut().zip(&g.data) {
                        *x += gx;
                    }
                });
                let sr = self.nodes[*row].value.shape();
                Self::add_grad(grads, *row, sr, |d| {
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            d.data[c] += g.data[r * g.cols + c];
                        }
                    }
                });
            }
            Op::MulRowBroadcast(a, row) => {
                let av = self.nodes[*a].value.clone();
                let rv = &self.nodes[*row].value;
                Self::add_grad(grads, *a, av.shape(), |d| {
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            d.data[r * g.cols + c] += g.data[r * g.cols + c] * rv.data[c];
                        }
                    }
                });
                Self::add_grad(grads, *row, rv.shape(), |d| {
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            d.data[c] += g.data[r * g.cols + c] * av.data[r * g.cols + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let shape = self.nodes[p].value.shape();
                    Self::add_grad(grads, p, shape, |d| {
                        let n = shape.0 * shape.1;
                        let src = &g.data[start * g.cols..start * g.cols + n];
                        for (x, &gx) in d.data.iter_mut().zip(src) {
                            *x += gx;
                        }
                    });
                    start += shape.0;
                }
            }
            Op::SliceRows(a, start) => {
                let shape = self.nodes[*a].value.shape();
                Self::add_grad(grads, *a, shape, |d| {
                    let base = start * shape.1;
                    for (i, &gx) in g.data.iter().enumerate() {
                        d.data[base + i] += gx;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.nodes[p].value.shape();
                    Self::add_grad(grads, p, shape, |d| {
                        for r in 0..shape.0 {
                            for c in 0..shape.1 {
                                d.data[r * shape.1 + c] += g.data[r * g.cols + offset + c];
                            }
                        }
                    });
                    offset += shape.1;
                }
            }
            Op::SliceCols(a, start) => {
                let shape = self.nodes[*a].value.shape();
                Self::add_grad(grads, *a, shape, |d| {
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            d.data[r * shape.1 + start + c] += g.data[r * g.cols + c];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[*a].value;
                Self::add_grad(grads, *a, av.shape(), |d| {
                    for ((x, &gx), &inp) in d.data.iter_mut().zip(&g.data).zip(&av.data) {
                        if inp > 0.0 {
                            *x += gx;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let shape = self.nodes[*a].value.shape();
                Self::add_grad(grads, *a, shape, |d| {
                    for r in 0..y.rows {
                        let yr = &y.data[r * y.cols..(r + 1) * y.cols];
                        let gr = &g.data[r * y.cols..(r + 1) * y.cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let dr = &mut d.data[r * y.cols..(r + 1) * y.cols];
                        for ((x, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *x += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows(a) => {
                let y = &node.value;
                let shape = self.nodes[*a].value.shape();
                let n = shape.1 as f64;
                Self::add_grad(grads, *a, shape, |d| {
                    for r in 0..y.rows {
                        let inv_std = node.aux[r];
                        let yr = &y.data[r * y.cols..(r + 1) * y.cols];
                        let gr = &g.data[r * y.cols..(r + 1) * y.cols];
                        let mean_g: f64 = gr.iter().sum::<f64>() / n;
                        let mean_gy: f64 = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<f64>() / n;
                        let dr = &mut d.data[r * y.cols..(r + 1) * y.cols];
                        for ((x, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += inv_std * (gv - mean_g - yv * mean_gy);
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let shape = self.nodes[*a].value.shape();
                let inv = 1.0 / shape.0 as f64;
                Self::add_grad(grads, *a, shape, |d| {
                    for r in 0..shape.0 {
                        for c in 0..shape.1 {
                            d.data[r * shape.1 + c] += g.data[c] * inv;
                        }
                    }
                });
            }
            Op::L2NormalizeRows(a) => {
                let y = &node.value;
                let shape = self.nodes[*a].value.shape();
                Self::add_grad(grads, *a, shape, |d| {
                    for r in 0..y.rows {
                        let norm = node.aux[r];
                        let yr = &y.data[r * y.cols..(r + 1) * y.cols];
                        let gr = &g.data[r * y.cols..(r + 1) * y.cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let dr = &mut d.data[r * y.cols..(r + 1) * y.cols];
                        for ((x, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += (gv - yv * dot) / norm;
                        }
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let av = &self.nodes[*a].value;
                Self::add_grad(grads, *a, av.shape(), |d| {
                    for r in 0..av.rows {
                        let row = av.row_slice(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                        let dr = &mut d.data[r * av.cols..(r + 1) * av.cols];
                        for (x, &inp) in dr.iter_mut().zip(row) {
                            *x += g.data[r] * (inp - max).exp() / sum;
                        }
                    }
                });
            }
            Op::TakeDiag(a) => {
                let shape = self.nodes[*a].value.shape();
                Self::add_grad(grads, *a, shape, |d| {
                    for i in 0..shape.0 {
                        d.data[i * shape.1 + i] += g.data[i];
                    }
                });
            }
            Op::Log(a, floor) => {
                let av = &self.nodes[*a].value;
                Self::add_grad(grads, *a, av.shape(), |d| {
                    for ((x, &gx), &inp) in d.data.iter_mut().zip(&g.data).zip(&av.data) {
                        if inp >= *floor {
                            *x += gx / inp;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                let shape = self.nodes[*a].value.shape();
                Self::add_grad(grads, *a, shape, |d| {
                    for ((x, &gx), &yv) in d.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *x += gx * yv;
                    }
                });
            }
            Op::SumAll(a) => {
                let shape = self.nodes[*a].value.shape();
                Self::add_grad(grads, *a, shape, |d| {
                    for x in d.data.iter_mut() {
                        *x += g.data[0];
                    }
                });
            }
            Op::MeanAll(a) => {
                let shape = self.nodes[*a].value.shape();
                let inv = 1.0 / (shape.0 * shape.1) as f64;
                Self::add_grad(grads, *a, shape, |d| {
                    for x in d.data.iter_mut() {
                        *x += g.data[0] * inv;
                    }
                });
            }
        }
    }
}

/// Weights of one pre-norm transformer block, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Linear layer `x . w + b` with `b` broadcast over rows.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row_broadcast(xw, b)
}

fn layer_norm_affine(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let normed = tape.layer_norm_rows(x);
    let scaled = tape.mul_row_broadcast(normed, gain)?;
    tape.add_row_broadcast(scaled, bias)
}

/// One pre-norm transformer block over an N x d token matrix:
/// `x + attn(LN(x))` then `+ mlp(LN(.))`, multi-head scaled dot-product
/// attention, relu MLP with hidden width 4d, no positional encoding.
pub fn transformer_block(tape: &mut Tape, x: Var, p: &BlockVars, heads: usize) -> Result<Var> {
    let d = tape.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} not divisible by {heads} attention heads"
        )));
    }
    let dh = d / heads;

    let normed = layer_norm_affine(tape, x, p.ln1_gain, p.ln1_bias)?;
    let q = linear(tape, normed, p.wq, p.bq)?;
    let k = linear(tape, normed, p.wk, p.bk)?;
    let v = linear(tape, normed, p.wv, p.bv)?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&head_outs)?;
    let projected = linear(tape, merged, p.wo, p.bo)?;
    let after_attn = tape.add(x, projected)?;

    let normed2 = layer_norm_affine(tape, after_attn, p.ln2_gain, p.ln2_bias)?;
    let hidden = linear(tape, normed2, p.w1, p.b1)?;
    let activated = tape.relu(hidden);
    let mlp_out = linear(tape, activated, p.w2, p.b2)?;
    tape.add(after_attn, mlp_out)
}
