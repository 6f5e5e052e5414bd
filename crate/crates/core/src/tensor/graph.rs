use std::collections::HashMap;

use super::{ParamId, ParamStore, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Exp(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    Normalize { x: Var, inv_std: Vec<S> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Transpose(Var),
    CausalMask(Var),
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    Clamp { x: Var, lo: S, hi: S },
    Nll {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    SoftCrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        target: Vec<S>,
        probs: Vec<S>,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    rows: usize,
    cols: usize,
    value: Vec<S>,
    op: Op<S>,
}

/// A tape of 2-D values. Vectors are `1 × n`, scalars `1 × 1`.
///
/// Elementwise binary ops broadcast the right operand when it is a single
/// row (or a single element).
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, addressable by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<S>, op: Op<S>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.node(v).value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar_value(&self, v: Var) -> S {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape is consistent")
    }

    /// A constant (or differentiable input) with no upstream.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<S>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(TensorError::BadLength {
                shape: vec![rows, cols],
                len: value.len(),
            });
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    pub fn row_leaf(&mut self, value: Vec<S>) -> Var {
        let n = value.len();
        self.push(1, n, value, Op::Leaf)
    }

    /// Brings a parameter onto the tape. Repeated calls within one graph
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = store.get(id);
        let (r, c) = t.matrix_dims();
        let v = self.push(r, c, t.data().to_vec(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        TensorError::ShapeMismatch {
            op,
            lhs: vec![ar, ac],
            rhs: vec![br, bc],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_kernel(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    fn broadcast_ok(&self, a: Var, b: Var) -> bool {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        (ar == br && ac == bc) || (br == 1 && bc == ac) || (br == 1 && bc == 1)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        if !self.broadcast_ok(a, b) {
            return Err(self.shape_err(name, a, b));
        }
        let (rows, cols) = self.dims(a);
        let (br, bc) = self.dims(b);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let bi = if br == 1 { 0 } else { i };
                let bj = if bc == 1 { 0 } else { j };
                out.push(f(av[i * cols + j], bv[bi * bc + bj]));
            }
        }
        Ok(self.push(rows, cols, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x + s).collect();
        self.push(r, c, out, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(r, c, out, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(r, c, out, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        self.push(r, c, out, Op::Gelu(a))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        self.push(r, c, out, Op::Softmax(a))
    }

    /// Layer normalization of each row without the affine part.
    pub fn normalize(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let eps = S::lit(LAYER_NORM_EPS);
        let n = S::from_usize_lossy(c);
        let mut out = self.value(a).to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in out.chunks_mut(c.max(1)) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rs;
            }
            inv_std.push(rs);
        }
        self.push(r, c, out, Op::Normalize { x: a, inv_std })
    }

    /// `normalize(x) * gamma + beta` with row-vector gamma and beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.normalize(x);
        let s = self.mul(n, gamma)?;
        self.add(s, beta)
    }

    /// Gathers rows of `table` (vocab × dim) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::OutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            ids.len(),
            d,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat_cols" })?;
        let rows = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(self.shape_err("concat_cols", first, p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat_rows" })?;
        let cols = self.dims(first).1;
        for &p in parts {
            if self.dims(p).1 != cols {
                return Err(self.shape_err("concat_rows", first, p));
            }
        }
        let rows: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > c {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: end,
                size: c,
            });
        }
        let w = end - start;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        Ok(self.push(r, w, out, Op::SliceCols { x, start }))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > r {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                index: end,
                size: r,
            });
        }
        let out = self.value(x)[start * c..end * c].to_vec();
        Ok(self.push(end - start, c, out, Op::SliceRows { x, start }))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![S::zero(); r * c];
        transpose_into(self.value(x), &mut out, r, c);
        self.push(c, r, out, Op::Transpose(x))
    }

    /// Sets entry `(i, j)` to `-inf` wherever `j > i`.
    pub fn causal_mask(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for i in 0..r {
            for j in (i + 1)..c {
                out[i * c + j] = S::neg_infinity();
            }
        }
        self.push(r, c, out, Op::CausalMask(x))
    }

    /// Mean over `axis` (0: over rows → `1 × c`, 1: over columns → `r × 1`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        match axis {
            0 => {
                let mut out = vec![S::zero(); c];
                for row in xv.chunks(c) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                let n = S::from_usize_lossy(r);
                out.iter_mut().for_each(|o| *o /= n);
                Ok(self.push(1, c, out, Op::MeanAxis { x, axis }))
            }
            1 => {
                let n = S::from_usize_lossy(c);
                let out = xv.chunks(c).map(|row| row.iter().copied().sum::<S>() / n).collect();
                Ok(self.push(r, 1, out, Op::MeanAxis { x, axis }))
            }
            _ => Err(TensorError::OutOfRange {
                op: "mean_axis",
                index: axis,
                size: 2,
            }),
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<S>();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        self.push(r, c, out, Op::Clamp { x, lo, hi })
    }

    /// Mean negative log-likelihood of `targets[i]` under the softmax of
    /// logits row `rows[i]`.
    pub fn nll(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
        let (r, v) = self.dims(logits);
        if rows.is_empty() {
            return Err(TensorError::Empty { op: "nll" });
        }
        if rows.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "nll",
                lhs: vec![rows.len()],
                rhs: vec![targets.len()],
            });
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = S::zero();
        for (&row, &t) in rows.iter().zip(targets) {
            if row >= r {
                return Err(TensorError::OutOfRange {
                    op: "nll",
                    index: row,
                    size: r,
                });
            }
            if t >= v {
                return Err(TensorError::OutOfRange {
                    op: "nll",
                    index: t,
                    size: v,
                });
            }
            let logit_row = &lv[row * v..(row + 1) * v];
            let lse = log_sum_exp(logit_row);
            total += lse - logit_row[t];
            probs.extend(logit_row.iter().map(|&x| (x - lse).exp()));
        }
        let loss = total / S::from_usize_lossy(rows.len());
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::Nll {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over `rows` of `-Σ_v target[i, v] · log softmax(logits[rows[i]])_v`.
    /// `target` holds one distribution per listed row.
    pub fn soft_cross_entropy(&mut self, logits: Var, rows: &[usize], target: &[S]) -> Result<Var> {
        let (r, v) = self.dims(logits);
        if rows.is_empty() {
            return Err(TensorError::Empty {
                op: "soft_cross_entropy",
            });
        }
        if target.len() != rows.len() * v {
            return Err(TensorError::ShapeMismatch {
                op: "soft_cross_entropy",
                lhs: vec![rows.len(), v],
                rhs: vec![target.len()],
            });
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = S::zero();
        for (i, &row) in rows.iter().enumerate() {
            if row >= r {
                return Err(TensorError::OutOfRange {
                    op: "soft_cross_entropy",
                    index: row,
                    size: r,
                });
            }
            let logit_row = &lv[row * v..(row + 1) * v];
            let lse = log_sum_exp(logit_row);
            for (k, &x) in logit_row.iter().enumerate() {
                let t = target[i * v + k];
                if t != S::zero() {
                    total -= t * (x - lse);
                }
                probs.push((x - lse).exp());
            }
        }
        let loss = total / S::from_usize_lossy(rows.len());
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::SoftCrossEntropy {
                logits,
                rows: rows.to_vec(),
                target: target.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a `1 × 1` loss. Parameter gradients are added to
    /// `store`, so repeated calls accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<Gradients<S>> {
        let grads = self.backward_inner(loss)?;
        for node_grad in grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (i, g))) {
            if let Op::Param(id) = self.nodes[node_grad.0].op {
                store.get_mut(id).accumulate_grad(node_grad.1);
            }
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass without touching any parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<S>> {
        Ok(Gradients {
            grads: self.backward_inner(loss)?,
        })
    }

    fn backward_inner(&self, loss: Var) -> Result<Vec<Option<Vec<S>>>> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(TensorError::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                // dA = dC · Bᵀ
                let mut bt = vec![S::zero(); k * n];
                transpose_into(self.value(*b), &mut bt, k, n);
                let mut da = vec![S::zero(); m * k];
                matmul_kernel(g, &bt, &mut da, m, n, k);
                add_into(slot(grads, *a, m * k), &da);
                // dB = Aᵀ · dC
                let av = self.value(*a);
                let db = slot(grads, *b, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += aip * gv;
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -S::one()
                } else {
                    S::one()
                };
                add_into(slot(grads, *a, rows * cols), g);
                let (br, bc) = self.dims(*b);
                let gb = reduce_broadcast(g, rows, cols, br, bc);
                let dst = slot(grads, *b, br * bc);
                for (d, v) in dst.iter_mut().zip(gb) {
                    *d += sign * v;
                }
            }
            Op::Mul(a, b) => {
                let (br, bc) = self.dims(*b);
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut ga = Vec::with_capacity(rows * cols);
                let mut gab = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for j in 0..cols {
                        let bi = if br == 1 { 0 } else { i };
                        let bj = if bc == 1 { 0 } else { j };
                        let gv = g[i * cols + j];
                        ga.push(gv * bv[bi * bc + bj]);
                        gab.push(gv * av[i * cols + j]);
                    }
                }
                add_into(slot(grads, *a, rows * cols), &ga);
                let gb = reduce_broadcast(&gab, rows, cols, br, bc);
                add_into(slot(grads, *b, br * bc), &gb);
            }
            Op::Scale(a, s) => {
                let dst = slot(grads, *a, rows * cols);
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d += gv * *s;
                }
            }
            Op::AddScalar(a) => add_into(slot(grads, *a, rows * cols), g),
            Op::Exp(a) => {
                let y = &node.value;
                let dst = slot(grads, *a, rows * cols);
                for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                    *d += gv * yv;
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let dst = slot(grads, *a, rows * cols);
                for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                    *d += gv * (S::one() - yv * yv);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let dst = slot(grads, *a, rows * cols);
                for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(x) {
                    *d += gv * gelu_grad(xv);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let dst = slot(grads, *a, rows * cols);
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                    for j in 0..cols {
                        dst[i * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Normalize { x, inv_std } => {
                let y = &node.value;
                let n = S::from_usize_lossy(cols);
                let dst = slot(grads, *x, rows * cols);
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let mean_g = gr.iter().copied().sum::<S>() / n;
                    let mean_gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>() / n;
                    for j in 0..cols {
                        dst[i * cols + j] += inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.dims(*table);
                let dst = slot(grads, *table, v * d);
                for (i, &id) in ids.iter().enumerate() {
                    for (t, &gv) in dst[id * d..(id + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *t += gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    let dst = slot(grads, p, rows * c);
                    for i in 0..rows {
                        for j in 0..c {
                            dst[i * c + j] += g[i * cols + offset + j];
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.dims(p).0 * cols;
                    add_into(slot(grads, p, len), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (xr, xc) = self.dims(*x);
                let dst = slot(grads, *x, xr * xc);
                for i in 0..rows {
                    for j in 0..cols {
                        dst[i * xc + start + j] += g[i * cols + j];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let (xr, xc) = self.dims(*x);
                let dst = slot(grads, *x, xr * xc);
                add_into(&mut dst[start * xc..(start + rows) * xc], g);
            }
            Op::Transpose(x) => {
                let mut t = vec![S::zero(); rows * cols];
                transpose_into(g, &mut t, rows, cols);
                add_into(slot(grads, *x, rows * cols), &t);
            }
            Op::CausalMask(x) => {
                let dst = slot(grads, *x, rows * cols);
                for i in 0..rows {
                    for j in 0..=i.min(cols.saturating_sub(1)) {
                        dst[i * cols + j] += g[i * cols + j];
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let (xr, xc) = self.dims(*x);
                let dst = slot(grads, *x, xr * xc);
                if *axis == 0 {
                    let n = S::from_usize_lossy(xr);
                    for i in 0..xr {
                        for j in 0..xc {
                            dst[i * xc + j] += g[j] / n;
                        }
                    }
                } else {
                    let n = S::from_usize_lossy(xc);
                    for i in 0..xr {
                        for j in 0..xc {
                            dst[i * xc + j] += g[i] / n;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let (xr, xc) = self.dims(*x);
                let dst = slot(grads, *x, xr * xc);
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let dst = slot(grads, *x, rows * cols);
                for ((d, &gv), &v) in dst.iter_mut().zip(g).zip(xv) {
                    if v >= *lo && v <= *hi {
                        *d += gv;
                    }
                }
            }
            Op::Nll {
                logits,
                rows: rws,
                targets,
                probs,
            } => {
                let (lr, v) = self.dims(*logits);
                let scale = g[0] / S::from_usize_lossy(rws.len());
                let dst = slot(grads, *logits, lr * v);
                for (i, (&row, &t)) in rws.iter().zip(targets).enumerate() {
                    let p = &probs[i * v..(i + 1) * v];
                    let d = &mut dst[row * v..(row + 1) * v];
                    for (dv, &pv) in d.iter_mut().zip(p) {
                        *dv += scale * pv;
                    }
                    d[t] -= scale;
                }
            }
            Op::SoftCrossEntropy {
                logits,
                rows: rws,
                target,
                probs,
            } => {
                let (lr, v) = self.dims(*logits);
                let scale = g[0] / S::from_usize_lossy(rws.len());
                let dst = slot(grads, *logits, lr * v);
                for (i, &row) in rws.iter().enumerate() {
                    let p = &probs[i * v..(i + 1) * v];
                    let t = &target[i * v..(i + 1) * v];
                    let mass = t.iter().copied().sum::<S>();
                    let d = &mut dst[row * v..(row + 1) * v];
                    for k in 0..v {
                        d[k] += scale * (p[k] * mass - t[k]);
                    }
                }
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut Vec<S> {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn reduce_broadcast<S: Scalar>(g: &[S], rows: usize, cols: usize, br: usize, bc: usize) -> Vec<S> {
    if br == rows && bc == cols {
        return g.to_vec();
    }
    let mut out = vec![S::zero(); br * bc];
    for i in 0..rows {
        for j in 0..cols {
            let bi = if br == 1 { 0 } else { i };
            let bj = if bc == 1 { 0 } else { j };
            out[bi * bc + bj] += g[i * cols + j];
        }
    }
    out
}

/// `out += a (m×k) · b (k×n)`, fixed summation order.
fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn transpose_into<S: Scalar>(src: &[S], dst: &mut [S], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<S>().ln()
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn gelu_consts<S: Scalar>() -> (S, S) {
    (S::lit((2.0 / std::f64::consts::PI).sqrt()), S::lit(0.044715))
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let (c, a) = gelu_consts::<S>();
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let (c, a) = gelu_consts::<S>();
    let half = S::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g64() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = g64();
        let a = g.leaf(2, 3, vec![1.0; 6]).unwrap();
        let b = g.leaf(3, 2, vec![1.0; 6]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.dims(c), (2, 2));
        assert_eq!(g.value(c), &[3.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = g64();
        let a = g.leaf(2, 3, vec![1.0; 6]).unwrap();
        let b = g.leaf(2, 3, vec![1.0; 6]).unwrap();
        match g.matmul(a, b).unwrap_err() {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn add_rejects_non_leading_broadcast() {
        let mut g = g64();
        let a = g.leaf(2, 3, vec![1.0; 6]).unwrap();
        let b = g.leaf(2, 1, vec![1.0; 2]).unwrap();
        assert!(g.add(a, b).is_err());
        let row = g.row_leaf(vec![1.0, 2.0, 3.0]);
        let s = g.add(a, row).unwrap();
        assert_eq!(g.value(s), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = g64();
        let a = g.row_leaf(vec![0.0, 0.0]);
        let s = g.softmax(a);
        assert_eq!(g.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn normalize_constant_row_is_zero() {
        let mut g = Graph::<f32>::new();
        let a = g.row_leaf(vec![4.0; 8]);
        let n = g.normalize(a);
        assert!(g.value(n).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = g64();
        let mut store = ParamStore::new();
        let w = g.row_leaf(vec![1.0, 2.0]);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss, &mut store).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn saturated_cross_entropy_has_tiny_gradient() {
        let mut g = g64();
        let logits = g.row_leaf(vec![10.0, -10.0]);
        let loss = g.nll(logits, &[0], &[0]).unwrap();
        let grads = g.gradients(loss).unwrap();
        assert!(grads.get(logits).unwrap()[0].abs() < 1e-8);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = g64();
        let a = g.row_leaf(vec![1.0, 2.0]);
        let mut store = ParamStore::new();
        assert!(matches!(
            g.backward(a, &mut store),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn param_gradients_accumulate_across_backward_calls() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let t = g.tanh(w);
        let sq = g.mul(t, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        let once = store.get(id).grad().unwrap().to_vec();
        g.backward(loss, &mut store).unwrap();
        let twice = store.get(id).grad().unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn same_param_is_one_node() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("w", Tensor::zeros(vec![2, 2]));
        let mut g = Graph::new();
        assert_eq!(g.param(&store, id), g.param(&store, id));
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut g = g64();
        let a = g.leaf(3, 3, vec![1.0; 9]).unwrap();
        let m = g.causal_mask(a);
        let s = g.softmax(m);
        let v = g.value(s);
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert!((v[3] - 0.5).abs() < 1e-12 && v[5] == 0.0);
    }

    #[test]
    fn embedding_out_of_range() {
        let mut g = g64();
        let t = g.leaf(3, 2, vec![0.0; 6]).unwrap();
        assert!(matches!(
            g.embedding(t, &[0, 3]),
            Err(TensorError::OutOfRange { .. })
        ));
    }
}
