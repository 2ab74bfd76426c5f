//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the recipe
//! needed to push an adjoint back to its inputs. [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients into every leaf that requires
//! them. A tape lives for one forward pass; build a fresh one per batch.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Norms below this are treated as zero by the cosine operations.
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Relu(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    Softmax {
        src: Var,
        causal: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    CosineRows {
        query: Var,
        rows: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder. Create with [`Tape::new`] for training passes or
/// [`Tape::no_grad`] for pure inference, where nothing is recorded.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of non-leaf operations recorded so far.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = self.recording && tensor.requires_grad();
        let tensor = if self.recording {
            tensor
        } else {
            tensor.with_requires_grad(false)
        };
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: left is {m}x{k}, right is {k2}x{n}"
            )));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a (m x k) * b^T` where `b` is `n x k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_bt: left is {m}x{k}, right (transposed) is {n}x{k2}"
            )));
        }
        let out = matmul_bt_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let out = transpose_raw(self.value(a).values(), r, c);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let out: Vec<f64> = va
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let va = self.value(a);
        let out: Vec<f64> = va
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let out: Vec<f64> = va
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let va = self.value(a);
        let out = va.values().iter().map(|x| x * factor).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Scale(a, factor), &[a]))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let b = self.value(bias).values();
        if b.len() != n {
            return Err(Error::Dimension(format!(
                "add_row_bias: matrix is {m}x{n}, bias has {} entries",
                b.len()
            )));
        }
        let mut out = self.value(x).values().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let out = vx.values().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Relu(x), &[x]))
    }

    /// Valid (unpadded) 1-D cross-correlation.
    ///
    /// `input` is `channels x length`, `kernel` is `out x channels x width`,
    /// `bias` (optional) has `out` entries. Output is `out x out_len` with
    /// `out_len = (length - width) / stride + 1`.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (channels, length) = self.dims2(input)?;
        let (out_ch, k_ch, width) = match self.shape(kernel) {
            [o, c, w] => (*o, *c, *w),
            other => {
                return Err(Error::Rank(format!(
                    "conv1d kernel must be out x channels x width, got {other:?}"
                )))
            }
        };
        if k_ch != channels {
            return Err(Error::Dimension(format!(
                "conv1d: signal has {channels} channels, kernel expects {k_ch}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        if width > length {
            return Err(Error::EmptyOutput(format!(
                "conv1d kernel width {width} exceeds signal length {length}"
            )));
        }
        if let Some(b) = bias {
            let nb = self.value(b).len();
            if nb != out_ch {
                return Err(Error::Dimension(format!(
                    "conv1d bias has {nb} entries, expected {out_ch}"
                )));
            }
        }
        let out_len = (length - width) / stride + 1;
        let x = self.value(input).values();
        let k = self.value(kernel).values();
        let mut out = vec![0.0; out_ch * out_len];
        for o in 0..out_ch {
            let orow = &mut out[o * out_len..(o + 1) * out_len];
            for c in 0..channels {
                let xrow = &x[c * length..(c + 1) * length];
                let krow = &k[(o * channels + c) * width..(o * channels + c + 1) * width];
                for (w, &kw) in krow.iter().enumerate() {
                    let taps = xrow[w..].iter().step_by(stride);
                    orow.iter_mut().zip(taps).for_each(|(acc, &xv)| *acc += kw * xv);
                }
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).values();
            for o in 0..out_ch {
                out[o * out_len..(o + 1) * out_len]
                    .iter_mut()
                    .for_each(|v| *v += bv[o]);
            }
        }
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        Ok(self.push(
            Tensor::matrix(out_ch, out_len, out)?,
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
            },
            &parents,
        ))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(src)?;
        if len == 0 || start + len > r {
            return Err(Error::Index(format!(
                "rows {start}..{} of a {r}x{c} matrix",
                start + len
            )));
        }
        let out = self.value(src).values()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::matrix(len, c, out)?, Op::SliceRows(src, start), &[src]))
    }

    /// One row of a matrix as a rank-1 tensor.
    pub fn row(&mut self, src: Var, i: usize) -> Result<Var> {
        let r = self.slice_rows(src, i, 1)?;
        let n = self.shape(r)[1];
        self.reshape(r, vec![n])
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(src)?;
        if len == 0 || start + len > c {
            return Err(Error::Index(format!(
                "columns {start}..{} of a {r}x{c} matrix",
                start + len
            )));
        }
        let v = self.value(src).values();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols(src, start), &[src]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_cols of nothing".into()))?;
        let (r, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(Error::Dimension(format!(
                    "concat_cols: {pr} rows vs {r} rows"
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).values()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::matrix(r, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Stacks equal-length tensors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::Dimension("stack_rows of nothing".into()))?;
        let n = self.value(first).len();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let v = self.value(r);
            if v.len() != n {
                return Err(Error::Dimension(format!(
                    "stack_rows: row of {} values vs {n}",
                    v.len()
                )));
            }
            out.extend_from_slice(v.values());
        }
        Ok(self.push(
            Tensor::matrix(rows.len(), n, out)?,
            Op::StackRows(rows.to_vec()),
            rows,
        ))
    }

    pub fn reshape(&mut self, src: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(src).clone().with_requires_grad(false).reshape(shape)?;
        let t = Tensor::new(t.shape().to_vec(), t.into_values())?;
        Ok(self.push(t, Op::Reshape(src), &[src]))
    }

    /// Mean over the rows of an `m x n` matrix, giving a length-`n` vector.
    pub fn mean_rows(&mut self, src: Var) -> Result<Var> {
        let (m, n) = self.dims2(src)?;
        let v = self.value(src).values();
        let mut out = vec![0.0; n];
        for row in v.chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(self.push(Tensor::vector(out)?, Op::MeanRows(src), &[src]))
    }

    pub fn sum(&mut self, src: Var) -> Result<Var> {
        let s = self.value(src).values().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(src), &[src]))
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter().copied();
        let mut acc = iter
            .next()
            .ok_or_else(|| Error::Dimension("add_all of nothing".into()))?;
        for t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`
    /// and the rest are exactly zero; the matrix must then be square.
    pub fn softmax(&mut self, src: Var, causal: bool) -> Result<Var> {
        let (r, c) = self.dims2(src)?;
        if causal && r != c {
            return Err(Error::Dimension(format!(
                "causal softmax needs a square matrix, got {r}x{c}"
            )));
        }
        let v = self.value(src).values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let width = if causal { i + 1 } else { c };
            let row = &v[i * c..i * c + width];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                out[i * c + j] = e;
                total += e;
            }
            out[i * c..i * c + width].iter_mut().for_each(|e| *e /= total);
        }
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::Softmax { src, causal },
            &[src],
        ))
    }

    /// Mean over the batch of `-log softmax(logits_i)[target_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits)?;
        if targets.len() != b {
            return Err(Error::Dimension(format!(
                "cross entropy: {b} rows of logits but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!(
                "target class {bad} with only {c} classes"
            )));
        }
        let v = self.value(logits).values();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &v[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[targets[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Cosine similarity between `query` (length `d`) and each row of `rows`
    /// (`n x d`), giving a length-`n` vector. A pair where either norm is
    /// below [`COSINE_EPS`] scores 0 and passes no gradient.
    pub fn cosine_rows(&mut self, query: Var, rows: Var) -> Result<Var> {
        let (n, d) = self.dims2(rows)?;
        let q = self.value(query).values();
        if q.len() != d {
            return Err(Error::Dimension(format!(
                "cosine: query has {} entries, rows have {d}",
                q.len()
            )));
        }
        let m = self.value(rows).values();
        let qn = norm(q);
        let out = (0..n)
            .map(|j| {
                let r = &m[j * d..(j + 1) * d];
                let rn = norm(r);
                if qn < COSINE_EPS || rn < COSINE_EPS {
                    0.0
                } else {
                    dot(q, r) / (qn * rn)
                }
            })
            .collect();
        Ok(self.push(
            Tensor::vector(out)?,
            Op::CosineRows { query, rows },
            &[query, rows],
        ))
    }

    /// Cosine similarity of two equal-length vectors as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(b).len();
        let rows = self.reshape(b, vec![1, n])?;
        let s = self.cosine_rows(a, rows)?;
        self.reshape(s, vec![])
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.accumulate_grad(&g);
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if self.wants(*a) {
                    // dA = G * B^T
                    let ga = matmul_bt_raw(g, self.value(*b).values(), m, n, k);
                    accumulate(adj, *a, &ga);
                }
                if self.wants(*b) {
                    // dB = A^T * G
                    let at = transpose_raw(self.value(*a).values(), m, k);
                    let gb = matmul_raw(&at, g, k, m, n);
                    accumulate(adj, *b, &gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().0;
                if self.wants(*a) {
                    // dA = G * B
                    let ga = matmul_raw(g, self.value(*b).values(), m, n, k);
                    accumulate(adj, *a, &ga);
                }
                if self.wants(*b) {
                    // dB = G^T * A
                    let gt = transpose_raw(g, m, n);
                    let gb = matmul_raw(&gt, self.value(*a).values(), n, m, k);
                    accumulate(adj, *b, &gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                accumulate(adj, *a, &transpose_raw(g, c, r));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, g);
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, g);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(adj, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).values(), self.value(*b).values());
                if self.wants(*a) {
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    accumulate(adj, *a, &ga);
                }
                if self.wants(*b) {
                    let gb: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(adj, *b, &gb);
                }
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                accumulate(adj, *a, &ga);
            }
            Op::AddRowBias(x, b) => {
                if self.wants(*x) {
                    accumulate(adj, *x, g);
                }
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    accumulate(adj, *b, &gb);
                }
            }
            Op::Relu(x) => {
                let out = node.value.values();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(out)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(adj, *x, &gx);
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
            } => self.conv1d_backward(*input, *kernel, *bias, *stride, g, adj),
            Op::SliceRows(src, start) => {
                let (r, c) = self.value(*src).dims2().unwrap();
                let mut gs = vec![0.0; r * c];
                gs[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(adj, *src, &gs);
            }
            Op::SliceCols(src, start) => {
                let (r, c) = self.value(*src).dims2().unwrap();
                let len = g.len() / r;
                let mut gs = vec![0.0; r * c];
                for i in 0..r {
                    gs[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(adj, *src, &gs);
            }
            Op::ConcatCols(parts) => {
                let r = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(adj, p, &gp);
                    }
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                let n = node.value.shape()[1];
                for (i, &r) in rows.iter().enumerate() {
                    if self.wants(r) {
                        accumulate(adj, r, &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::Reshape(src) => accumulate(adj, *src, g),
            Op::MeanRows(src) => {
                let (m, n) = self.value(*src).dims2().unwrap();
                let mut gs = Vec::with_capacity(m * n);
                for _ in 0..m {
                    gs.extend(g.iter().map(|x| x / m as f64));
                }
                accumulate(adj, *src, &gs);
            }
            Op::Sum(src) => {
                let n = self.value(*src).len();
                accumulate(adj, *src, &vec![g[0]; n]);
            }
            Op::Softmax { src, causal } => {
                let (r, c) = node.value.dims2().unwrap();
                let y = node.value.values();
                let mut gs = vec![0.0; r * c];
                for i in 0..r {
                    let width = if *causal { i + 1 } else { c };
                    let yr = &y[i * c..i * c + width];
                    let gr = &g[i * c..i * c + width];
                    let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..width {
                        gs[i * c + j] = yr[j] * (gr[j] - inner);
                    }
                }
                accumulate(adj, *src, &gs);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = targets.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * c + t] -= scale;
                }
                accumulate(adj, *logits, &gl);
            }
            Op::CosineRows { query, rows } => {
                let q = self.value(*query).values();
                let m = self.value(*rows).values();
                let d = q.len();
                let s = node.value.values();
                let qn = norm(q);
                let mut gq = vec![0.0; d];
                let mut gr = vec![0.0; m.len()];
                if qn >= COSINE_EPS {
                    for (j, (&gj, &sj)) in g.iter().zip(s).enumerate() {
                        let r = &m[j * d..(j + 1) * d];
                        let rn = norm(r);
                        if rn < COSINE_EPS || gj == 0.0 {
                            continue;
                        }
                        let inv = 1.0 / (qn * rn);
                        for t in 0..d {
                            gq[t] += gj * (r[t] * inv - sj * q[t] / (qn * qn));
                            gr[j * d + t] += gj * (q[t] * inv - sj * r[t] / (rn * rn));
                        }
                    }
                }
                if self.wants(*query) {
                    accumulate(adj, *query, &gq);
                }
                if self.wants(*rows) {
                    accumulate(adj, *rows, &gr);
                }
            }
        }
    }

    fn conv1d_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let (channels, length) = self.value(input).dims2().unwrap();
        let ks = self.value(kernel).shape();
        let (out_ch, width) = (ks[0], ks[2]);
        let out_len = g.len() / out_ch;
        let x = self.value(input).values();
        let k = self.value(kernel).values();
        if self.wants(kernel) {
            let mut gk = vec![0.0; k.len()];
            for o in 0..out_ch {
                let grow = &g[o * out_len..(o + 1) * out_len];
                for c in 0..channels {
                    let xrow = &x[c * length..(c + 1) * length];
                    let gkrow = &mut gk[(o * channels + c) * width..(o * channels + c + 1) * width];
                    for (w, gkw) in gkrow.iter_mut().enumerate() {
                        let taps = xrow[w..].iter().step_by(stride);
                        *gkw += grow.iter().zip(taps).map(|(gt, xv)| gt * xv).sum::<f64>();
                    }
                }
            }
            accumulate(adj, kernel, &gk);
        }
        if self.wants(input) {
            let mut gx = vec![0.0; x.len()];
            for o in 0..out_ch {
                let grow = &g[o * out_len..(o + 1) * out_len];
                for c in 0..channels {
                    let krow = &k[(o * channels + c) * width..(o * channels + c + 1) * width];
                    let gxrow = &mut gx[c * length..(c + 1) * length];
                    for (w, &kw) in krow.iter().enumerate() {
                        let taps = gxrow[w..].iter_mut().step_by(stride);
                        taps.zip(grow).for_each(|(gx, gt)| *gx += gt * kw);
                    }
                }
            }
            accumulate(adj, input, &gx);
        }
        if let Some(b) = bias {
            if self.wants(b) {
                let gb: Vec<f64> = g.chunks(out_len).map(|row| row.iter().sum()).collect();
                accumulate(adj, b, &gb);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += aip * b);
        }
    }
    out
}

fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = t.constant(Tensor::identity(2));
        let p = t.matmul(a, i).unwrap();
        assert_eq!(t.value(p).values(), &[1.0, 2.0, 3.0, 4.0]);

        let r = t.constant(mat(&[vec![1.0, 0.0]]));
        let c = t.constant(mat(&[vec![0.0], vec![1.0]]));
        let p = t.matmul(r, c).unwrap();
        assert_eq!(t.value(p).values(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("right is 2x3"), "{err}");
    }

    #[test]
    fn conv1d_moving_sum_and_delta() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![1.0, 2.0, 3.0, 4.0]]));
        let k = t.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let y = t.conv1d(x, k, None, 1).unwrap();
        assert_eq!(t.value(y).values(), &[3.0, 5.0, 7.0]);

        let delta = t.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = t.conv1d(x, delta, None, 1).unwrap();
        assert_eq!(t.value(y).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv1d_stride_length_formula() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![2, 64]));
        let k = t.constant(Tensor::zeros(vec![3, 2, 7]));
        let y = t.conv1d(x, k, None, 2).unwrap();
        assert_eq!(t.shape(y), &[3, 29]);
    }

    #[test]
    fn conv1d_wide_kernel_is_empty_output_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![1, 3]));
        let k = t.constant(Tensor::zeros(vec![1, 1, 4]));
        assert!(matches!(t.conv1d(x, k, None, 1), Err(Error::EmptyOutput(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_stable() {
        let mut t = Tape::new();
        let l = t.constant(mat(&[vec![0.0, 0.0]]));
        let loss = t.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((t.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let l = t.constant(mat(&[vec![1000.0, 0.0]]));
        let loss = t.softmax_cross_entropy(l, &[0]).unwrap();
        let v = t.value(loss).item().unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut t = Tape::new();
        let l = t.constant(mat(&[vec![0.0, 0.0]]));
        assert!(matches!(
            t.softmax_cross_entropy(l, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        let mut t = Tape::new();
        let cases = [
            (vec![3.0, 4.0], vec![3.0, 4.0], 1.0),
            (vec![1.0, 0.0], vec![0.0, 1.0], 0.0),
            (vec![1.0, 1.0], vec![1.0, 0.0], std::f64::consts::FRAC_1_SQRT_2),
        ];
        for (a, b, want) in cases {
            let a = t.constant(Tensor::vector(a).unwrap());
            let b = t.constant(Tensor::vector(b).unwrap());
            let s = t.cosine_similarity(a, b).unwrap();
            assert!((t.value(s).item().unwrap() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_zero_vector_is_zero_with_zero_grad() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let b = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let s = t.cosine_similarity(a, b).unwrap();
        assert_eq!(t.value(s).item().unwrap(), 0.0);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(t.grad(b).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut t = Tape::new();
        let theta = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.sum(theta).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(theta).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let theta = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = t.mul(theta, theta).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(theta).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t = Tape::new();
        let theta = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let s = t.sum(theta).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(theta).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let theta = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = t.scale(theta, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Rank(_))));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut t = Tape::no_grad();
        let a = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let s = t.sum(a).unwrap();
        assert_eq!(t.value(s).item().unwrap(), 3.0);
        assert_eq!(t.recorded_ops(), 0);
        t.backward(s).unwrap();
        assert!(t.grad(a).is_none());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![1.0, 9.0], vec![1.0, 2.0]]));
        let y = t.softmax(x, true).unwrap();
        let v = t.value(y).values();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-15);
    }
}
