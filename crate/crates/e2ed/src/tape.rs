//! Reverse-mode differentiation over a recorded forward sequence.
//!
//! The model architecture is static, so there is no general graph engine
//! here: a [`Tape`] records each forward operation in issue order, and
//! [`Tape::backward`] walks the record in reverse applying one explicit
//! vector-Jacobian rule per operation. Every rule is validated against
//! central finite differences (see [`crate::gradcheck`]).
//!
//! All values are row-major `f64`. Reductions accumulate left to right so
//! identical inputs always produce bitwise-identical outputs.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op {
    Leaf {
        param: Option<usize>,
    },
    Matmul {
        a: ValueId,
        b: ValueId,
    },
    MatmulNt {
        a: ValueId,
        b: ValueId,
    },
    /// y = x * w^T + b with b broadcast over rows; w is stored [out x in].
    Linear {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        a: ValueId,
        factor: f64,
    },
    Gelu {
        a: ValueId,
    },
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    },
    SoftmaxRows {
        a: ValueId,
    },
    /// Fused multi-head scaled-dot-product attention over one sequence.
    /// Caches the per-head attention probabilities for the backward pass.
    Attention {
        q: ValueId,
        k: ValueId,
        v: ValueId,
        heads: usize,
        causal: bool,
        probs: Vec<f64>,
    },
    ConcatRows {
        parts: Vec<ValueId>,
    },
    ConcatCols {
        parts: Vec<ValueId>,
    },
    SliceRows {
        a: ValueId,
        start: usize,
        end: usize,
    },
    Embedding {
        table: ValueId,
        ids: Vec<u32>,
    },
    CrossEntropy {
        logits: ValueId,
        targets: Vec<u32>,
        ignore: u32,
        softmax: Vec<f64>,
        count: usize,
    },
    Mse {
        pred: ValueId,
        target: ValueId,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
}

/// Recorded forward sequence with per-op backward rules.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: Vec<(ValueId, usize)>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if it received any.
    pub fn wrt(&self, id: ValueId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { shape, data, op });
        id
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn to_tensor(&self, id: ValueId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape nodes are internally consistent")
    }

    /// Number of scalar elements in a recorded value.
    pub fn numel(&self, id: ValueId) -> usize {
        self.nodes[id.0].data.len()
    }

    fn rows_last(&self, id: ValueId) -> (usize, usize) {
        let shape = &self.nodes[id.0].shape;
        let last = *shape.last().unwrap();
        (self.nodes[id.0].data.len() / last, last)
    }

    fn dims2(&self, id: ValueId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[id.0].shape.clone(),
                rhs: vec![0, 0],
            }),
        }
    }

    // -- construction -------------------------------------------------------

    /// Record an input value with no gradient destination.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None })
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Leaf { param: None })
    }

    /// Record a model parameter; `index` keys the gradient on export.
    pub fn param(&mut self, index: usize, t: &Tensor) -> ValueId {
        let id = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: Some(index) });
        self.param_leaves.push((id, index));
        id
    }

    /// (ValueId, parameter index) pairs in recording order.
    pub fn param_leaves(&self) -> &[(ValueId, usize)] {
        &self.param_leaves
    }

    // -- operations ---------------------------------------------------------

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, ka, n, 1.0, self.value(a), self.value(b), 0.0, &mut out);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }))
    }

    /// a * b^T with b stored [n x k].
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.dims2(a, "matmul_nt")?;
        let (n, kb) = self.dims2(b, "matmul_nt")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, ka, n, 1.0, self.value(a), self.value(b), 0.0, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatmulNt { a, b }))
    }

    /// Row-wise affine map: y[l x out] = x[l x in] * w[out x in]^T + b[out].
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (l, xin) = self.dims2(x, "linear")?;
        let (out, win) = self.dims2(w, "linear")?;
        if xin != win || self.nodes[b.0].shape[..] != [out] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[w.0].shape.clone(),
            });
        }
        let mut y = vec![0.0; l * out];
        gemm_nt(l, xin, out, 1.0, self.value(x), self.value(w), 0.0, &mut y);
        let bias = self.value(b);
        for row in y.chunks_exact_mut(out) {
            for (yj, bj) in row.iter_mut().zip(bias) {
                *yj += bj;
            }
        }
        Ok(self.push(vec![l, out], y, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Add { a, b }))
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> ValueId {
        let data = self.value(a).iter().map(|x| x * factor).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Scale { a, factor })
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let data = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Gelu { a })
    }

    /// Normalize over the last axis with population variance.
    pub fn layernorm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: f64) -> Result<ValueId> {
        let (rows, d) = self.rows_last(x);
        if self.nodes[gamma.0].shape[..] != [d] || self.nodes[beta.0].shape[..] != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(self.nodes[x.0].shape.clone(), out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax_rows(&mut self, a: ValueId) -> ValueId {
        let (rows, n) = self.rows_last(a);
        let xs = self.value(a);
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            softmax_into(row, &mut out[r * n..(r + 1) * n]);
        }
        self.push(self.nodes[a.0].shape.clone(), out, Op::SoftmaxRows { a })
    }

    /// Multi-head scaled-dot-product attention over one sequence of length L.
    /// `q`, `k`, `v` are all [L x d] with `heads` dividing d. When `causal`,
    /// row i attends only to positions 0..=i; masked entries never enter any
    /// sum, which keeps prefix activations bitwise independent of the suffix.
    pub fn attention(&mut self, q: ValueId, k: ValueId, v: ValueId, heads: usize, causal: bool) -> Result<ValueId> {
        let (l, d) = self.dims2(q, "attention")?;
        for other in [k, v] {
            if self.nodes[other.0].shape[..] != [l, d] {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    lhs: self.nodes[q.0].shape.clone(),
                    rhs: self.nodes[other.0].shape.clone(),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: vec![l, d],
                rhs: vec![heads],
            });
        }
        let dh = d / heads;
        let scl = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).to_vec();
        let kd = self.value(k).to_vec();
        let vd = self.value(v).to_vec();
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        for h in 0..heads {
            let ph = &mut probs[h * l * l..(h + 1) * l * l];
            // scores = scl * q_h * k_h^T, using strided head views
            unsafe {
                matrixmultiply::dgemm(
                    l,
                    dh,
                    l,
                    scl,
                    qd.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    kd.as_ptr().add(h * dh),
                    1,
                    d as isize,
                    0.0,
                    ph.as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
            for i in 0..l {
                let lim = if causal { i + 1 } else { l };
                let row = &mut ph[i * l..i * l + l];
                softmax_prefix(row, lim);
            }
            // ctx_h = P * v_h written into the head's column block
            unsafe {
                matrixmultiply::dgemm(
                    l,
                    l,
                    dh,
                    1.0,
                    ph.as_ptr(),
                    l as isize,
                    1,
                    vd.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    0.0,
                    out.as_mut_ptr().add(h * dh),
                    d as isize,
                    1,
                );
            }
        }
        Ok(self.push(vec![l, d], out, Op::Attention { q, k, v, heads, causal, probs }))
    }

    /// Stack rank-2 parts vertically; all parts share a column count.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let (_, cols) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, cols], data, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Concatenate along the last axis. Rank-1 parts join end to end;
    /// rank-2 parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let rank = self.nodes[parts[0].0].shape.len();
        if rank == 1 {
            let mut data = Vec::new();
            for &p in parts {
                if self.nodes[p.0].shape.len() != 1 {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        lhs: self.nodes[parts[0].0].shape.clone(),
                        rhs: self.nodes[p.0].shape.clone(),
                    });
                }
                data.extend_from_slice(self.value(p));
            }
            let n = data.len();
            return Ok(self.push(vec![n], data, Op::ConcatCols { parts: parts.to_vec() }));
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            total_cols += c;
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.dims2(p, "concat_cols")?;
            let src = self.value(p);
            for r in 0..rows {
                data[r * total_cols + offset..r * total_cols + offset + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        Ok(self.push(vec![rows, total_cols], data, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Rows [start, end) of a rank-2 value.
    pub fn slice_rows(&mut self, a: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (rows, cols) = self.dims2(a, "slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::Index(format!(
                "slice_rows: [{start}, {end}) out of 0..{rows}"
            )));
        }
        let data = self.value(a)[start * cols..end * cols].to_vec();
        Ok(self.push(vec![end - start, cols], data, Op::SliceRows { a, start, end }))
    }

    /// Gather rows of `table` [V x d] by token id; backward scatter-adds.
    pub fn embedding(&mut self, table: ValueId, ids: &[u32]) -> Result<ValueId> {
        let (v, d) = self.dims2(table, "embedding")?;
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Index(format!(
                    "embedding: id {id} out of vocab {v}"
                )));
            }
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], data, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Mean negative log-likelihood over non-ignored rows of [T x V] logits.
    /// All rows ignored is defined as zero loss with zero gradient.
    pub fn cross_entropy(&mut self, logits: ValueId, targets: &[u32], ignore: u32) -> Result<ValueId> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len()],
            });
        }
        for &tgt in targets {
            if tgt != ignore && tgt as usize >= v {
                return Err(Error::Index(format!(
                    "cross_entropy: target {tgt} out of vocab {v}"
                )));
            }
        }
        let xs = self.value(logits);
        let mut softmax = vec![0.0; t * v];
        let mut loss = 0.0;
        let mut count = 0usize;
        for r in 0..t {
            if targets[r] == ignore {
                continue;
            }
            let row = &xs[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                softmax[r * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                softmax[r * v + j] /= sum;
            }
            loss += max + sum.ln() - row[targets[r] as usize];
            count += 1;
        }
        if count > 0 {
            loss /= count as f64;
        }
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, softmax, count },
        ))
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, pred: ValueId, target: ValueId) -> Result<ValueId> {
        if self.nodes[pred.0].shape != self.nodes[target.0].shape {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.nodes[pred.0].shape.clone(),
                rhs: self.nodes[target.0].shape.clone(),
            });
        }
        let n = self.nodes[pred.0].data.len() as f64;
        let loss = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        Ok(self.push(vec![1], vec![loss], Op::Mse { pred, target }))
    }

    // -- backward -----------------------------------------------------------

    /// Propagate `seed` from the scalar `root` back to every contributing
    /// value. Panics if `root` is not a scalar.
    pub fn backward(&self, root: ValueId, seed: f64) -> Gradients {
        assert_eq!(self.nodes[root.0].data.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![seed]);

        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.apply_vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn apply_vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], id: ValueId, len: usize| -> *mut f64 {
            grads[id.0]
                .get_or_insert_with(|| vec![0.0; len])
                .as_mut_ptr()
        };
        let len = |id: ValueId| self.nodes[id.0].data.len();

        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                // dA += g * B^T ; dB += A^T * g
                let da = acc(grads, *a, len(*a));
                let da = unsafe { std::slice::from_raw_parts_mut(da, m * k) };
                gemm_nt(m, n, k, 1.0, g, self.value(*b), 1.0, da);
                let db = acc(grads, *b, len(*b));
                let db = unsafe { std::slice::from_raw_parts_mut(db, k * n) };
                gemm_tn(k, m, n, 1.0, self.value(*a), g, 1.0, db);
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                // y = a * b^T : dA += g * b ; dB += g^T * a
                let da = acc(grads, *a, len(*a));
                let da = unsafe { std::slice::from_raw_parts_mut(da, m * k) };
                gemm_nn(m, n, k, 1.0, g, self.value(*b), 1.0, da);
                let db = acc(grads, *b, len(*b));
                let db = unsafe { std::slice::from_raw_parts_mut(db, n * k) };
                gemm_tn(n, m, k, 1.0, g, self.value(*a), 1.0, db);
            }
            Op::Linear { x, w, b } => {
                let (l, xin) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let out = self.nodes[w.0].shape[0];
                let dx = acc(grads, *x, len(*x));
                let dx = unsafe { std::slice::from_raw_parts_mut(dx, l * xin) };
                gemm_nn(l, out, xin, 1.0, g, self.value(*w), 1.0, dx);
                let dw = acc(grads, *w, len(*w));
                let dw = unsafe { std::slice::from_raw_parts_mut(dw, out * xin) };
                gemm_tn(out, l, xin, 1.0, g, self.value(*x), 1.0, dw);
                let db = grads[b.0].get_or_insert_with(|| vec![0.0; out]);
                for row in g.chunks_exact(out) {
                    for (dbj, gj) in db.iter_mut().zip(row) {
                        *dbj += gj;
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    let d = grads[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (dj, gj) in d.iter_mut().zip(g) {
                        *dj += gj;
                    }
                }
            }
            Op::Scale { a, factor } => {
                let d = grads[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                for (dj, gj) in d.iter_mut().zip(g) {
                    *dj += factor * gj;
                }
            }
            Op::Gelu { a } => {
                let xs = self.value(*a);
                let d = grads[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                for j in 0..g.len() {
                    d[j] += g[j] * gelu_derivative(xs[j]);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (rows, dcol) = self.rows_last(*x);
                let xs = self.value(*x);
                let gam = self.value(*gamma);
                {
                    let db = grads[beta.0].get_or_insert_with(|| vec![0.0; dcol]);
                    for r in 0..rows {
                        for j in 0..dcol {
                            db[j] += g[r * dcol + j];
                        }
                    }
                }
                // Recompute row statistics; cheaper than caching them.
                let mut dgamma = vec![0.0; dcol];
                let mut dx = vec![0.0; rows * dcol];
                for r in 0..rows {
                    let row = &xs[r * dcol..(r + 1) * dcol];
                    let gr = &g[r * dcol..(r + 1) * dcol];
                    let mean = row.iter().sum::<f64>() / dcol as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dcol as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut sum_gg = 0.0;
                    let mut sum_ggx = 0.0;
                    for j in 0..dcol {
                        let xhat = (row[j] - mean) * inv;
                        let gg = gr[j] * gam[j];
                        dgamma[j] += gr[j] * xhat;
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                    }
                    let m1 = sum_gg / dcol as f64;
                    let m2 = sum_ggx / dcol as f64;
                    for j in 0..dcol {
                        let xhat = (row[j] - mean) * inv;
                        dx[r * dcol + j] = (gr[j] * gam[j] - m1 - xhat * m2) * inv;
                    }
                }
                {
                    let dg = grads[gamma.0].get_or_insert_with(|| vec![0.0; dcol]);
                    for j in 0..dcol {
                        dg[j] += dgamma[j];
                    }
                }
                let d = grads[x.0].get_or_insert_with(|| vec![0.0; rows * dcol]);
                for j in 0..rows * dcol {
                    d[j] += dx[j];
                }
            }
            Op::SoftmaxRows { a } => {
                let (rows, n) = self.rows_last(*a);
                let p = &self.nodes[i].data;
                let d = grads[a.0].get_or_insert_with(|| vec![0.0; rows * n]);
                for r in 0..rows {
                    let pr = &p[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = gr.iter().zip(pr).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        d[r * n + j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Attention { q, k, v, heads, causal, probs } => {
                self.attention_vjp(g, *q, *k, *v, *heads, *causal, probs, grads);
            }
            Op::ConcatRows { parts } => {
                let cols = self.nodes[i].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let r = self.nodes[p.0].shape[0];
                    let d = grads[p.0].get_or_insert_with(|| vec![0.0; r * cols]);
                    for j in 0..r * cols {
                        d[j] += g[offset + j];
                    }
                    offset += r * cols;
                }
            }
            Op::ConcatCols { parts } => {
                if self.nodes[i].shape.len() == 1 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].data.len();
                        let d = grads[p.0].get_or_insert_with(|| vec![0.0; n]);
                        for j in 0..n {
                            d[j] += g[offset + j];
                        }
                        offset += n;
                    }
                } else {
                    let rows = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].shape[1];
                        let d = grads[p.0].get_or_insert_with(|| vec![0.0; rows * c]);
                        for r in 0..rows {
                            for j in 0..c {
                                d[r * c + j] += g[r * total + offset + j];
                            }
                        }
                        offset += c;
                    }
                }
            }
            Op::SliceRows { a, start, end } => {
                let cols = self.nodes[a.0].shape[1];
                let d = grads[a.0].get_or_insert_with(|| vec![0.0; len(*a)]);
                for j in 0..(end - start) * cols {
                    d[start * cols + j] += g[j];
                }
            }
            Op::Embedding { table, ids } => {
                let dcol = self.nodes[table.0].shape[1];
                let d = grads[table.0].get_or_insert_with(|| vec![0.0; len(*table)]);
                for (pos, &id) in ids.iter().enumerate() {
                    let dst = id as usize * dcol;
                    for j in 0..dcol {
                        d[dst + j] += g[pos * dcol + j];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore, softmax, count } => {
                if *count == 0 {
                    return;
                }
                let (t, v) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let scale = g[0] / *count as f64;
                let d = grads[logits.0].get_or_insert_with(|| vec![0.0; t * v]);
                for r in 0..t {
                    if targets[r] == *ignore {
                        continue;
                    }
                    for j in 0..v {
                        d[r * v + j] += scale * softmax[r * v + j];
                    }
                    d[r * v + targets[r] as usize] -= scale;
                }
            }
            Op::Mse { pred, target } => {
                let n = len(*pred);
                let scale = 2.0 * g[0] / n as f64;
                let ps = self.value(*pred);
                let ts = self.value(*target);
                {
                    let d = grads[pred.0].get_or_insert_with(|| vec![0.0; n]);
                    for j in 0..n {
                        d[j] += scale * (ps[j] - ts[j]);
                    }
                }
                let d = grads[target.0].get_or_insert_with(|| vec![0.0; n]);
                for j in 0..n {
                    d[j] -= scale * (ps[j] - ts[j]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_vjp(
        &self,
        g: &[f64],
        q: ValueId,
        k: ValueId,
        v: ValueId,
        heads: usize,
        causal: bool,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (l, d) = (self.nodes[q.0].shape[0], self.nodes[q.0].shape[1]);
        let dh = d / heads;
        let scl = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q);
        let kd = self.value(k);
        let vd = self.value(v);
        for id in [q, k, v] {
            grads[id.0].get_or_insert_with(|| vec![0.0; l * d]);
        }
        let mut dp = vec![0.0; l * l];
        for h in 0..heads {
            let ph = &probs[h * l * l..(h + 1) * l * l];
            // dV_h += P^T * dctx_h
            {
                let dv = grads[v.0].as_mut().expect("inserted above");
                unsafe {
                    matrixmultiply::dgemm(
                        l,
                        l,
                        dh,
                        1.0,
                        ph.as_ptr(),
                        1,
                        l as isize,
                        g.as_ptr().add(h * dh),
                        d as isize,
                        1,
                        1.0,
                        dv.as_mut_ptr().add(h * dh),
                        d as isize,
                        1,
                    );
                }
            }
            // dP = dctx_h * v_h^T
            unsafe {
                matrixmultiply::dgemm(
                    l,
                    dh,
                    l,
                    1.0,
                    g.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    vd.as_ptr().add(h * dh),
                    1,
                    d as isize,
                    0.0,
                    dp.as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
            // dS = P .* (dP - rowdot(dP, P)), masked entries stay zero
            for i in 0..l {
                let lim = if causal { i + 1 } else { l };
                let pr = &ph[i * l..i * l + l];
                let dr = &mut dp[i * l..i * l + l];
                let mut dot = 0.0;
                for j in 0..lim {
                    dot += dr[j] * pr[j];
                }
                for j in 0..lim {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
                for j in lim..l {
                    dr[j] = 0.0;
                }
            }
            // dQ_h += scl * dS * k_h ; dK_h += scl * dS^T * q_h
            {
                let dq = grads[q.0].as_mut().expect("inserted above");
                unsafe {
                    matrixmultiply::dgemm(
                        l,
                        l,
                        dh,
                        scl,
                        dp.as_ptr(),
                        l as isize,
                        1,
                        kd.as_ptr().add(h * dh),
                        d as isize,
                        1,
                        1.0,
                        dq.as_mut_ptr().add(h * dh),
                        d as isize,
                        1,
                    );
                }
            }
            {
                let dk = grads[k.0].as_mut().expect("inserted above");
                unsafe {
                    matrixmultiply::dgemm(
                        l,
                        l,
                        dh,
                        scl,
                        dp.as_ptr(),
                        1,
                        l as isize,
                        qd.as_ptr().add(h * dh),
                        d as isize,
                        1,
                        1.0,
                        dk.as_mut_ptr().add(h * dh),
                        d as isize,
                        1,
                    );
                }
            }
        }
    }
}

/// Tanh-approximation GELU with pinned constants.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over row[0..lim] in place; entries past `lim` are zeroed.
fn softmax_prefix(row: &mut [f64], lim: usize) {
    let max = row[..lim].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row[..lim].iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row[..lim].iter_mut() {
        *x /= sum;
    }
    for x in row[lim..].iter_mut() {
        *x = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_stability_closed_form() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 4], &[0.0, 0.0, 0.0, 0.0]));
        let s = tape.softmax_rows(a);
        for &p in tape.value(s) {
            assert!((p - 0.25).abs() < 1e-15);
        }

        let a = tape.leaf(&t(&[1, 2], &[1000.0, 1000.0]));
        let s = tape.softmax_rows(a);
        assert!(tape.value(s).iter().all(|p| (p - 0.5).abs() < 1e-15));

        let a = tape.leaf(&t(&[1, 2], &[0.0, 3.0f64.ln()]));
        let s = tape.softmax_rows(a);
        assert!((tape.value(s)[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(s)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_preserve_order() {
        let mut rng = SplitMix64::new(5);
        let mut tape = Tape::new();
        let x = Tensor::randn(&[6, 9], 3.0, &mut rng);
        let a = tape.leaf(&x);
        let s = tape.softmax_rows(a);
        let p = tape.value(s);
        for r in 0..6 {
            let row = &p[r * 9..(r + 1) * 9];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
            let xr = &x.data()[r * 9..(r + 1) * 9];
            for i in 0..9 {
                for j in 0..9 {
                    if xr[i] < xr[j] {
                        assert!(row[i] < row[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn gelu_pinned_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.84122).abs() < 1e-4);
        // formula value frozen to full precision
        assert!((gelu(1.0) - 0.8411919906082768).abs() < 1e-15);
    }

    #[test]
    fn layernorm_constant_row_and_two_point_row() {
        let mut tape = Tape::new();
        let gamma = tape.leaf(&t(&[4], &[1.0; 4]));
        let beta = tape.leaf(&t(&[4], &[0.0; 4]));
        let x = tape.leaf(&t(&[1, 4], &[5.0, 5.0, 5.0, 5.0]));
        let y = tape.layernorm(x, gamma, beta, 1e-5).unwrap();
        for &v in tape.value(y) {
            assert!(v.abs() < 1e-12);
        }

        let gamma = tape.leaf(&t(&[2], &[1.0; 2]));
        let beta = tape.leaf(&t(&[2], &[0.0; 2]));
        let x = tape.leaf(&t(&[1, 2], &[-1.0, 1.0]));
        let y = tape.layernorm(x, gamma, beta, 1e-5).unwrap();
        let want = 0.9999950000374997; // 1/sqrt(1 + 1e-5)
        assert!((tape.value(y)[0] + want).abs() < 1e-15);
        assert!((tape.value(y)[1] - want).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_confident_and_ignored() {
        let mut tape = Tape::new();
        let v = 261usize;
        let logits = tape.leaf(&Tensor::zeros(&[1, v]));
        let loss = tape.cross_entropy(logits, &[17], 256).unwrap();
        assert!((tape.value(loss)[0] - (v as f64).ln()).abs() < 1e-12);
        assert!((tape.value(loss)[0] - 5.5645).abs() < 1e-4);

        let mut hot = vec![0.0; v];
        hot[17] = 1e9;
        let logits = tape.leaf(&t(&[1, v], &hot));
        let loss = tape.cross_entropy(logits, &[17], 256).unwrap();
        assert!(tape.value(loss)[0].abs() < 1e-12);

        // one real position and one ignored: equals the single-position loss
        let mut rng = SplitMix64::new(2);
        let row = Tensor::randn(&[1, 5], 1.0, &mut rng);
        let mut two = row.data().to_vec();
        two.extend_from_slice(&[9.0, 8.0, 7.0, 6.0, 5.0]);
        let l1 = tape.leaf(&row);
        let l2 = tape.leaf(&t(&[2, 5], &two));
        let a = tape.cross_entropy(l1, &[3], 99).unwrap();
        let b = tape.cross_entropy(l2, &[3, 99], 99).unwrap();
        assert_eq!(tape.value(a)[0], tape.value(b)[0]);

        // all ignored: defined as zero loss, zero gradient
        let l3 = tape.leaf(&Tensor::zeros(&[2, 5]));
        let c = tape.cross_entropy(l3, &[99, 99], 99).unwrap();
        assert_eq!(tape.value(c)[0], 0.0);
        let grads = tape.backward(c, 1.0);
        assert!(grads.wrt(l3).is_none());
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(&[1, 5]));
        assert!(matches!(
            tape.cross_entropy(logits, &[5], 99),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn mse_identity_and_hand_case() {
        let mut tape = Tape::new();
        let mut rng = SplitMix64::new(4);
        let x = Tensor::randn(&[3, 4], 2.0, &mut rng);
        let a = tape.leaf(&x);
        let b = tape.leaf(&x);
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);

        let p = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let q = tape.leaf(&t(&[2], &[3.0, 4.0]));
        let l = tape.mse(p, q).unwrap();
        assert!((tape.value(l)[0] - 12.5).abs() < 1e-15);
    }

    #[test]
    fn embedding_scatter_adds_duplicate_rows() {
        let mut tape = Tape::new();
        let mut rng = SplitMix64::new(8);
        let table = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let tid = tape.leaf(&table);
        let e = tape.embedding(tid, &[0, 0]).unwrap();
        let w = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let prod = tape.mse(e, w).unwrap();
        let grads = tape.backward(prod, 1.0);
        let dt = grads.wrt(tid).unwrap();

        // loop-summed oracle: both lookup rows feed row 0 of the table
        let n = 6.0;
        for j in 0..3 {
            let want = 2.0 / n * (table.data()[j] - (j as f64 + 1.0))
                + 2.0 / n * (table.data()[j] - (j as f64 + 4.0));
            assert!((dt[j] - want).abs() < 1e-12);
        }
        for j in 3..12 {
            assert_eq!(dt[j], 0.0);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        let s = tape.slice_rows(c, 1, 3).unwrap();
        assert_eq!(tape.value(s), tape.value(b));

        let d = tape.concat_cols(&[a, a]).unwrap();
        assert_eq!(tape.shape(d), &[1, 4]);
        assert_eq!(tape.value(d), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn attention_rows_sum_to_one_over_prefix() {
        let mut rng = SplitMix64::new(3);
        let mut tape = Tape::new();
        let l = 7;
        let d = 8;
        let q = tape.leaf(&Tensor::randn(&[l, d], 1.0, &mut rng));
        let k = tape.leaf(&Tensor::randn(&[l, d], 1.0, &mut rng));
        let v = tape.leaf(&Tensor::randn(&[l, d], 1.0, &mut rng));
        let out = tape.attention(q, k, v, 2, true).unwrap();
        assert_eq!(tape.shape(out), &[l, d]);
        let Op::Attention { probs, .. } = &tape.nodes[out.0].op else {
            panic!("expected attention node");
        };
        for h in 0..2 {
            for i in 0..l {
                let row = &probs[h * l * l + i * l..h * l * l + (i + 1) * l];
                let sum: f64 = row[..=i].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&p| p == 0.0), "masked tail must be zero");
            }
        }
    }

    #[test]
    fn purity_identical_inputs_identical_bits() {
        let mut rng = SplitMix64::new(21);
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let b = Tensor::randn(&[4], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.leaf(&x);
            let wi = tape.leaf(&w);
            let bi = tape.leaf(&b);
            let y = tape.linear(xi, wi, bi).unwrap();
            let z = tape.gelu(y);
            tape.value(z).to_vec()
        };
        assert_eq!(run(), run());
    }
}
