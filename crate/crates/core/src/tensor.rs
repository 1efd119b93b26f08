//! Dense row-major matrices and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is an arena of nodes. Every op appends one node holding its
//! forward value and enough bookkeeping to run its local backward rule.
//! Handles into the arena are [`Var`]s. The tape is built fresh for every
//! forward pass and dropped afterwards.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Denominator guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("backward needs a scalar output, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense 2-D array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Input(format!(
                "buffer of length {} cannot hold {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// A single-row tensor.
    pub fn row_vector(values: &[f64]) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Builds a tensor from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: (1, cols),
                    rhs: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// The value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Gathers the given rows, in order, into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_into(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(out)
    }

    /// Adds a 1xC row to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `out += a[m×k] · b[k×n]`
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where `a` is m×k and `b` is m×n.
fn matmul_at_b_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is m×n and `b` is k×n.
fn matmul_a_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

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
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    CosineRows(Var, Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run recording of tensor ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf that is a gradient constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Gradient accumulated by the last [`Tape::backward`]. `None` for
    /// constants and for nodes the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let t = &self.nodes[v.0].value;
        Some(Tensor {
            rows: t.rows,
            cols: t.cols,
            data: g.clone(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Adds a 1xC bias row to each row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(value, rg, Op::AddRowBias(a, bias)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta
                .data
                .iter()
                .zip(&tb.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_values(a, b, |x, y| x + y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_values(a, b, |x, y| x - y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_values(a, b, |x, y| x * y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.needs(a);
        self.push(value, rg, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.needs(a);
        self.push(value, rg, Op::Relu(a))
    }

    /// Gathers rows of `a` by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.rows) {
            return Err(TensorError::Input(format!(
                "row index {bad} out of range for {} rows",
                src.rows
            )));
        }
        let value = src.select_rows(indices);
        let rg = self.needs(a);
        Ok(self.push(value, rg, Op::GatherRows(a, indices.to_vec())))
    }

    /// Sum of all elements as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        let rg = self.needs(a);
        self.push(value, rg, Op::Sum(a))
    }

    /// Pairwise cosine similarity between the rows of `a` (n×d) and `b` (m×d),
    /// giving an n×m matrix. Each entry is `u·v / (‖u‖‖v‖ + ε)`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.cols {
            return Err(TensorError::Shape {
                op: "cosine_rows",
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let na = row_norms(ta);
        let nb = row_norms(tb);
        let mut dots = Tensor::zeros(ta.rows, tb.rows);
        matmul_a_bt_into(
            &ta.data,
            &tb.data,
            &mut dots.data,
            ta.rows,
            ta.cols,
            tb.rows,
        );
        for (row, ni) in dots.data.chunks_mut(tb.rows).zip(&na) {
            for (d, nj) in row.iter_mut().zip(&nb) {
                *d /= ni * nj + COSINE_EPS;
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(dots, rg, Op::CosineRows(a, b)))
    }

    /// Cosine similarity of two row vectors, as a 1x1 tensor.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.rows != 1 || tv.rows != 1 || tu.cols != tv.cols {
            return Err(TensorError::Shape {
                op: "cosine_similarity",
                lhs: tu.shape(),
                rhs: tv.shape(),
            });
        }
        self.cosine_rows(u, v)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, k) = t.shape();
        if b == 0 || labels.len() != b {
            return Err(TensorError::Input(format!(
                "cross entropy over {b} rows with {} labels",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &z) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (z - max).exp();
                denom += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= denom;
            }
            loss += denom.ln() - (row[label] - max);
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse pass from a scalar. Gradients add across every use of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (rows, cols) = self.value(loss).shape();
        if rows != 1 || cols != 1 {
            return Err(TensorError::NotScalar { rows, cols });
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &upstream);
            self.grads[idx] = Some(upstream);
        }

        if self
            .grads
            .iter()
            .flatten()
            .flatten()
            .any(|g| !g.is_finite())
        {
            return Err(TensorError::NonFinite("backward"));
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, up: &[f64]) {
        // Ops only borrow their inputs, so the node can be read while
        // gradients are accumulated elsewhere in the arena.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).shape();
                let n = self.value(b).cols;
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_a_bt_into(up, &self.value(b).data, &mut da, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_b_into(&self.value(a).data, up, &mut db, m, k, n);
                    self.accumulate(b, &db);
                }
            }
            &Op::AddRowBias(a, bias) => {
                self.accumulate(a, up);
                if self.needs(bias) {
                    let n = self.value(bias).cols;
                    let mut db = vec![0.0; n];
                    for row in up.chunks(n) {
                        for (d, u) in db.iter_mut().zip(row) {
                            *d += u;
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(a, up);
                self.accumulate(b, up);
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, up);
                if self.needs(b) {
                    let neg: Vec<f64> = up.iter().map(|u| -u).collect();
                    self.accumulate(b, &neg);
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let da: Vec<f64> = up
                        .iter()
                        .zip(&self.value(b).data)
                        .map(|(u, y)| u * y)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = up
                        .iter()
                        .zip(&self.value(a).data)
                        .map(|(u, x)| u * x)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            &Op::Scale(a, factor) => {
                let da: Vec<f64> = up.iter().map(|u| u * factor).collect();
                self.accumulate(a, &da);
            }
            &Op::Relu(a) => {
                let da: Vec<f64> = up
                    .iter()
                    .zip(&self.value(a).data)
                    .map(|(u, &x)| if x > 0.0 { *u } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::GatherRows(a, indices) => {
                let a = *a;
                if self.needs(a) {
                    let (rows, cols) = self.value(a).shape();
                    let mut da = vec![0.0; rows * cols];
                    for (r, &src) in indices.iter().enumerate() {
                        for c in 0..cols {
                            da[src * cols + c] += up[r * cols + c];
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            &Op::Sum(a) => {
                let n = self.value(a).data.len();
                self.accumulate(a, &vec![up[0]; n]);
            }
            &Op::CosineRows(a, b) => self.cosine_backward(a, b, up),
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).cols;
                let b = labels.len() as f64;
                let mut d = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    d[i * k + label] -= 1.0;
                }
                for v in &mut d {
                    *v *= up[0] / b;
                }
                self.accumulate(*logits, &d);
            }
        }
        self.nodes[idx].op = op;
    }

    fn cosine_backward(&mut self, a: Var, b: Var, up: &[f64]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, d) = ta.shape();
        let m = tb.rows;
        let na = row_norms(ta);
        let nb = row_norms(tb);
        let mut da = vec![0.0; n * d];
        let mut db = vec![0.0; m * d];
        for i in 0..n {
            let u = ta.row(i);
            for j in 0..m {
                let g = up[i * m + j];
                if g == 0.0 {
                    continue;
                }
                let v = tb.row(j);
                let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                let denom = na[i] * nb[j] + COSINE_EPS;
                // d/du [dot / denom] = v/denom - dot * nb * (u/na) / denom²
                let cu = if na[i] > 0.0 {
                    dot * nb[j] / (na[i] * denom * denom)
                } else {
                    0.0
                };
                let cv = if nb[j] > 0.0 {
                    dot * na[i] / (nb[j] * denom * denom)
                } else {
                    0.0
                };
                for c in 0..d {
                    da[i * d + c] += g * (v[c] / denom - cu * u[c]);
                    db[j * d + c] += g * (u[c] / denom - cv * v[c]);
                }
            }
        }
        self.accumulate(a, &da);
        self.accumulate(b, &db);
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows)
        .map(|i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` records a scalar on a fresh tape from leaves holding `params`.
/// Returns the max over all coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .unwrap_or_else(|| Tensor::zeros(p.rows, p.cols))
        })
        .collect();

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..params[pi].data.len() {
            let orig = params[pi].data[ci];
            work[pi].data[ci] = orig + step;
            let plus = eval(&work)?;
            work[pi].data[ci] = orig - step;
            let minus = eval(&work)?;
            work[pi].data[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (grad.data[ci] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        // Hand-computed: [1*5+2*7, 1*6+2*8; 3*5+4*7, 3*6+4*8]
        assert_eq!(a.matmul(&b).unwrap(), t(&[&[19.0, 22.0], &[43.0, 50.0]]));
        assert_eq!(Tensor::identity(2).matmul(&b).unwrap(), b);
        assert_eq!(a.matmul(&Tensor::zeros(2, 3)).unwrap(), Tensor::zeros(2, 3));
        assert!(matches!(
            a.matmul(&Tensor::zeros(3, 1)),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn matmul_backward_rules() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        let ones = Tensor::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(tape.grad(va).unwrap(), ones.matmul(&b.transpose()).unwrap());
        assert_eq!(tape.grad(vb).unwrap(), a.transpose().matmul(&ones).unwrap());
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        // Subgradient at exactly zero is zero.
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let pos = tape.constant(Tensor::row_vector(&[0.5, 3.0]));
        let r = tape.relu(pos);
        assert_eq!(tape.value(r).data(), &[0.5, 3.0]);
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        let x = Tensor::row_vector(&[-1.0, 2.0]);
        let err = finite_difference_check(
            |tape, v| {
                let r = tape.relu(v[0]);
                Ok(tape.sum(r))
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9);
        let mut tape = Tape::new();
        let v = tape.param(x);
        let r = tape.relu(v);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::row_vector(&[0.0, 0.0]));
        let ce = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert_abs_diff_eq!(tape.value(ce).item(), 2f64.ln(), epsilon = 1e-15);

        let l4 = tape.constant(Tensor::row_vector(&[0.0; 4]));
        for label in 0..4 {
            let ce = tape.softmax_cross_entropy(l4, &[label]).unwrap();
            assert_abs_diff_eq!(tape.value(ce).item(), 4f64.ln(), epsilon = 1e-15);
        }

        let l2 = tape.constant(Tensor::row_vector(&[2.0, 0.0]));
        let ce = tape.softmax_cross_entropy(l2, &[1]).unwrap();
        let direct = -(1.0 / (2f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(tape.value(ce).item(), direct, epsilon = 1e-14);
        assert_abs_diff_eq!(tape.value(ce).item(), 2.126928, epsilon = 1e-6);

        assert_eq!(
            tape.softmax_cross_entropy(l2, &[2]).unwrap_err(),
            TensorError::LabelOutOfRange {
                label: 2,
                classes: 2
            }
        );
    }

    #[test]
    fn cross_entropy_stays_finite_on_huge_logits() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::row_vector(&[1e300, -1e300, 0.0]));
        let ce = tape.softmax_cross_entropy(l, &[1]).unwrap();
        // -log softmax is huge but finite after max subtraction; inf only
        // if the gap itself overflows, which 2e300 does not.
        assert!(tape.value(ce).item().is_finite());
        tape.backward(ce).unwrap();
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::row_vector(&[3.0, 4.0]));
        let c = tape.cosine_similarity(u, u).unwrap();
        assert_abs_diff_eq!(tape.value(c).item(), 1.0, epsilon = 1e-12);

        let e0 = tape.constant(Tensor::row_vector(&[1.0, 0.0]));
        let e1 = tape.constant(Tensor::row_vector(&[0.0, 1.0]));
        let c = tape.cosine_similarity(e0, e1).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);

        let d = tape.constant(Tensor::row_vector(&[1.0, 1.0]));
        let c = tape.cosine_similarity(e0, d).unwrap();
        assert_abs_diff_eq!(tape.value(c).item(), 1.0 / 2f64.sqrt(), epsilon = 1e-12);

        let z = tape.param(Tensor::row_vector(&[0.0, 0.0]));
        let c = tape.cosine_similarity(z, d).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
        tape.backward(c).unwrap();

        let w = tape.constant(Tensor::row_vector(&[1.0, 0.0, 0.0]));
        assert!(tape.cosine_similarity(w, d).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(&[1.0, -2.0, 5.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);

        let v = tape.param(Tensor::row_vector(&[1.0, 2.0]));
        assert_eq!(
            tape.backward(v).unwrap_err(),
            TensorError::NotScalar { rows: 1, cols: 2 }
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row_vector(&[1.0, 2.0]));
        let p = tape.param(Tensor::row_vector(&[3.0, 4.0]));
        let m = tape.mul(c, p).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn quadratic_finite_difference_is_exact() {
        let x = Tensor::row_vector(&[0.3, -1.2, 2.0]);
        let err = finite_difference_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                let sc = tape.scale(sq, 1.5);
                Ok(tape.sum(sc))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let g = tape.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(g).row(0), &[3.0, 4.0]);
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
        assert!(tape.gather_rows(x, &[2]).is_err());
    }
}
