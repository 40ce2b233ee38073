//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order of the computation; `backward` walks it once in reverse.
//! Every value is a matrix (`rows × cols`); scalars are `1 × 1`.

use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, dot, gelu, gelu_grad};
use super::{ParamGrads, ParamId, ParamStore, Tensor};
use crate::error::{HintError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RmsNorm { x: Var, inv_rms: Vec<f64> },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Mul(a, b) | Op::MulRow(a, b) => vec![*a, *b],
            Op::Transpose(a) | Op::Scale(a, _) | Op::Gelu(a) | Op::Softmax(a) => vec![*a],
            Op::Reshape(a) | Op::Sum(a) => vec![*a],
            Op::RmsNorm { x, .. } | Op::SliceCols { x, .. } | Op::SliceRows { x, .. } => vec![*x],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

/// A single forward computation and its recorded graph.
///
/// Parameter values are borrowed from the [`ParamStore`]; each parameter is
/// inserted at most once per tape, so every use of it (for instance the tied
/// encoder running over both the instruction and the input) accumulates into
/// one gradient.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
    macs: u64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Cow<'a, [f64]>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, [f64]>, rows: usize, cols: usize, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert (or reuse) a trainable parameter.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let t = store.get(id);
        let (r, c) = t.dims2();
        let v = self.leaf(Cow::Borrowed(t.data()), r, c, true);
        self.params.insert(id, v);
        v
    }

    /// A constant borrowed from elsewhere; receives no gradient.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        let (r, c) = t.dims2();
        self.leaf(Cow::Borrowed(t.data()), r, c, false)
    }

    /// A borrowed constant viewed as a `rows × cols` matrix.
    pub fn constant_view(&mut self, data: &'a [f64], rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "constant view shape");
        self.leaf(Cow::Borrowed(data), rows, cols, false)
    }

    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "constant shape");
        self.leaf(Cow::Owned(data), rows, cols, false)
    }

    /// A free leaf that receives a gradient (used for inputs under test).
    pub fn input(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.leaf(Cow::Owned(t.data().to_vec()), r, c, true)
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&[n.rows, n.cols], n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.shape(a);
        let (p2, q) = self.shape(b);
        if p != p2 {
            return Err(HintError::Dimension(format!(
                "matmul of [{m}×{p}] by [{p2}×{q}]"
            )));
        }
        let mut out = vec![0.0; m * q];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, p, q);
        self.macs += (m * p * q) as u64;
        Ok(self.push(Cow::Owned(out), m, q, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.shape(a);
        let (n, p2) = self.shape(b);
        if p != p2 {
            return Err(HintError::Dimension(format!(
                "matmul of [{m}×{p}] by transpose of [{n}×{p2}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt_acc(self.data(a), self.data(b), &mut out, m, p, n);
        self.macs += (m * p * n) as u64;
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMulBt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Cow::Owned(out), c, r, Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(HintError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.shape(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let (r, c) = self.shape(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::Mul(a, b)))
    }

    fn row_broadcast(&self, a: Var, row: Var, what: &str) -> Result<()> {
        let (_, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(HintError::Shape(format!(
                "{what}: row {:?} does not broadcast over {:?}",
                self.shape(row),
                self.shape(a)
            )));
        }
        Ok(())
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row")?;
        let (r, c) = self.shape(a);
        let rv = self.data(row);
        let out: Vec<f64> = self
            .data(a)
            .chunks_exact(c.max(1))
            .flat_map(|x| x.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(Cow::Owned(out), r, c, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a `1 × cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row")?;
        let (r, c) = self.shape(a);
        let rv = self.data(row);
        let out: Vec<f64> = self
            .data(a)
            .chunks_exact(c.max(1))
            .flat_map(|x| x.iter().zip(rv).map(|(x, y)| x * y))
            .collect();
        Ok(self.push(Cow::Owned(out), r, c, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * factor).collect();
        let (r, c) = self.shape(a);
        self.push(Cow::Owned(out), r, c, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| gelu(x)).collect();
        let (r, c) = self.shape(a);
        self.push(Cow::Owned(out), r, c, Op::Gelu(a))
    }

    /// Row-wise RMS normalization without gain: `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        let mut out = Vec::with_capacity(r * c);
        let mut inv_rms = Vec::with_capacity(r);
        for row in self.data(x).chunks_exact(c.max(1)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().map(|v| v * inv));
        }
        self.push(Cow::Owned(out), r, c, Op::RmsNorm { x, inv_rms })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_masked(x, None)
    }

    /// Row-wise softmax. With `causal = Some(offset)`, entry `(i, j)` is masked
    /// out whenever `j > i + offset`; columns below `offset` are therefore
    /// visible to every row.
    pub fn softmax_masked(&mut self, x: Var, causal: Option<usize>) -> Var {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; r * c];
        for (i, (src, dst)) in self
            .data(x)
            .chunks_exact(c.max(1))
            .zip(out.chunks_exact_mut(c.max(1)))
            .enumerate()
        {
            let limit = causal.map_or(c, |off| (i + off + 1).min(c));
            softmax_into(&src[..limit], &mut dst[..limit]);
        }
        self.push(Cow::Owned(out), r, c, Op::Softmax(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, |v| self.cols(*v));
        if parts.iter().any(|v| self.cols(*v) != c) {
            return Err(HintError::Shape("concat_rows with differing column counts".into()));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for v in parts {
            out.extend_from_slice(self.data(*v));
            rows += self.rows(*v);
        }
        Ok(self.push(Cow::Owned(out), rows, c, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |v| self.rows(*v));
        if parts.iter().any(|v| self.rows(*v) != r) {
            return Err(HintError::Shape("concat_cols with differing row counts".into()));
        }
        let total: usize = parts.iter().map(|v| self.cols(*v)).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in parts {
                let c = self.cols(*v);
                out.extend_from_slice(&self.data(*v)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(Cow::Owned(out), r, total, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(HintError::Shape(format!(
                "column slice {start}..{} of {c} columns",
                start + len
            )));
        }
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(c.max(1))
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Cow::Owned(out), r, len, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(HintError::Shape(format!("row slice {start}..{} of {r} rows", start + len)));
        }
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        Ok(self.push(Cow::Owned(out), len, c, Op::SliceRows { x, start }))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(HintError::Shape(format!("row index {id} out of {r}")));
            }
            out.extend_from_slice(&self.data(table)[id * c..(id + 1) * c]);
        }
        Ok(self.push(
            Cow::Owned(out),
            ids.len(),
            c,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r * c != rows * cols {
            return Err(HintError::Shape(format!("reshape [{r}×{c}] to [{rows}×{cols}]")));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(Cow::Owned(data), rows, cols, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Sum(x))
    }

    /// Summed token-level cross-entropy: `Σ_i −log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if r != targets.len() {
            return Err(HintError::Shape(format!(
                "{r} logit rows for {} targets",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for ((src, dst), &t) in self
            .data(logits)
            .chunks_exact(c)
            .zip(probs.chunks_exact_mut(c))
            .zip(targets)
        {
            if t >= c {
                return Err(HintError::Shape(format!("target {t} outside vocabulary {c}")));
            }
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - src[t];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - lse).exp();
            }
        }
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(HintError::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, p) = self.shape(*a);
                let q = cols;
                if self.wants(*a) {
                    let acc = slot(grads, *a, m * p);
                    kernels::matmul_bt_acc(g, self.data(*b), acc, m, q, p);
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, p * q);
                    kernels::matmul_at_acc(self.data(*a), g, acc, m, p, q);
                }
            }
            Op::MatMulBt(a, b) => {
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                let (m, p) = self.shape(*a);
                let n = cols;
                if self.wants(*a) {
                    let acc = slot(grads, *a, m * p);
                    kernels::matmul_acc(g, self.data(*b), acc, m, n, p);
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, n * p);
                    kernels::matmul_at_acc(g, self.data(*a), acc, m, n, p);
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let acc = slot(grads, *a, rows * cols);
                    // node is cols_a × rows_a = rows × cols; input is cols × rows
                    for i in 0..rows {
                        for j in 0..cols {
                            acc[j * rows + i] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.wants(*row) {
                    let acc = slot(grads, *row, cols);
                    for gr in g.chunks_exact(cols) {
                        add_into(acc, gr);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for ((o, gi), bi) in acc.iter_mut().zip(g).zip(self.data(*b)) {
                        *o += gi * bi;
                    }
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, g.len());
                    for ((o, gi), ai) in acc.iter_mut().zip(g).zip(self.data(*a)) {
                        *o += gi * ai;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.data(*row);
                if self.wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for (orow, grow) in acc.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        for ((o, gi), ri) in orow.iter_mut().zip(grow).zip(rv) {
                            *o += gi * ri;
                        }
                    }
                }
                if self.wants(*row) {
                    let av = self.data(*a);
                    let acc = slot(grads, *row, cols);
                    for (arow, grow) in av.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        for ((o, gi), ai) in acc.iter_mut().zip(grow).zip(arow) {
                            *o += gi * ai;
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    for (o, gi) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *o += gi * f;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let x = self.data(*a);
                    for ((o, gi), xi) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(x) {
                        *o += gi * gelu_grad(*xi);
                    }
                }
            }
            Op::RmsNorm { x, inv_rms } => {
                if self.wants(*x) {
                    // y = x·s, s = (mean(x²)+eps)^-1/2; dx = s·g − s³·x·(g·x)/c
                    let xv = self.data(*x);
                    let acc = slot(grads, *x, g.len());
                    for (((orow, grow), xrow), &s) in acc
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(xv.chunks_exact(cols))
                        .zip(inv_rms)
                    {
                        let gx = dot(grow, xrow);
                        let k = s * s * s * gx / cols as f64;
                        for ((o, gi), xi) in orow.iter_mut().zip(grow).zip(xrow) {
                            *o += s * gi - k * xi;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let acc = slot(grads, *a, g.len());
                    for ((orow, grow), yrow) in acc
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let gy = dot(grow, yrow);
                        for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - gy);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for v in parts {
                    let n = self.data(*v).len();
                    if self.wants(*v) {
                        add_into(slot(grads, *v, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col0 = 0;
                for v in parts {
                    let c = self.cols(*v);
                    if self.wants(*v) {
                        let acc = slot(grads, *v, rows * c);
                        for i in 0..rows {
                            add_into(
                                &mut acc[i * c..(i + 1) * c],
                                &g[i * cols + col0..i * cols + col0 + c],
                            );
                        }
                    }
                    col0 += c;
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let (xr, xc) = self.shape(*x);
                    let acc = slot(grads, *x, xr * xc);
                    for i in 0..rows {
                        add_into(
                            &mut acc[i * xc + start..i * xc + start + cols],
                            &g[i * cols..(i + 1) * cols],
                        );
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let (xr, xc) = self.shape(*x);
                    let acc = slot(grads, *x, xr * xc);
                    add_into(&mut acc[start * xc..(start + rows) * xc], g);
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let (tr, tc) = self.shape(*table);
                    let acc = slot(grads, *table, tr * tc);
                    for (gr, &id) in g.chunks_exact(tc).zip(ids) {
                        add_into(&mut acc[id * tc..(id + 1) * tc], gr);
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.data(*a).len();
                    slot(grads, *a, n).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let (_, c) = self.shape(*logits);
                    let acc = slot(grads, *logits, probs.len());
                    for ((orow, prow), &t) in acc
                        .chunks_exact_mut(c)
                        .zip(probs.chunks_exact(c))
                        .zip(targets)
                    {
                        for (o, p) in orow.iter_mut().zip(prow) {
                            *o += g[0] * p;
                        }
                        orow[t] -= g[0];
                    }
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradients of every parameter inserted on this tape.
    pub fn param_grads(&self, grads: &Gradients, num_params: usize) -> ParamGrads {
        let mut out = ParamGrads::new(num_params);
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (id, var) in ids {
            if let Some(g) = grads.wrt(*var) {
                out.add(*id, g);
            }
        }
        out
    }
}

fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a leaf. `None` when no path reaches the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
