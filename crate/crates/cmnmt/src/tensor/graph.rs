//! Reverse-mode automatic differentiation over row-major 2-D buffers.
//!
//! A [`Graph`] records one forward pass as a flat list of nodes; parents
//! always precede children, so the backward sweep is a single reverse
//! iteration. Everything is `f64`: gradient checking is the backbone of the
//! test suite and the model sizes are small enough that memory does not
//! matter.

use super::ParamSet;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a[r,c] + broadcast row[1,c]
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// a[r,c] * s where s is a 1x1 node
    ScaleByScalar(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Row-wise softmax; `mask[i*cols+j] == false` entries get zero weight.
    SoftmaxRows {
        input: NodeId,
        mask: Option<Vec<bool>>,
    },
    /// Row-wise layer norm with learned gain/bias rows.
    LayerNormRows {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    /// Gather rows of `table` by index.
    Embed { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    SliceRows { input: NodeId, start: usize },
    SliceCols { input: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    Transpose(NodeId),
    /// Sum over rows t of -ln(probs[t, targets[t]]); output is 1x1.
    NllFromProbs { probs: NodeId, targets: Vec<usize> },
    /// out[i, cols[j]] += in[i, j]; collisions accumulate.
    ScatterAddCols { input: NodeId, cols: Vec<usize> },
    /// a[r,c] * broadcast column s[r,1]
    MulCol(NodeId, NodeId),
    SumAll(NodeId),
    /// Inverted dropout with a frozen keep mask.
    Dropout {
        input: NodeId,
        keep: Vec<bool>,
        scale: f64,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(values.len(), rows * cols);
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node {
            rows,
            cols,
            values,
            grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0].rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id.0].cols
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Value of a 1x1 node.
    pub fn item(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id.0].values.len(), 1, "item() on non-scalar node");
        self.nodes[id.0].values[0]
    }

    /// Constant leaf; receives gradients but they are discarded.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> NodeId {
        assert_eq!(values.len(), rows * cols);
        self.push(rows, cols, values, Op::Leaf { param: None })
    }

    /// Leaf backed by parameter `index` of the set; gradients accumulate back
    /// into the parameter via [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, params: &ParamSet, index: usize) -> NodeId {
        let t = params.at(index);
        let (rows, cols) = t.matrix_shape();
        self.push(rows, cols, t.values.clone(), Op::Leaf { param: Some(index) })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        matmul_into(
            &self.nodes[a.0].values,
            &self.nodes[b.0].values,
            m,
            k,
            n,
            &mut out,
        );
        self.push(m, n, out, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        assert_eq!(
            (self.rows(a), self.cols(a)),
            (self.rows(b), self.cols(b)),
            "elementwise op on mismatched shapes"
        );
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(self.rows(a), self.cols(a), values, op)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!(self.rows(row), 1, "bias must be a row vector");
        assert_eq!(self.cols(row), c, "bias width mismatch");
        let mut values = self.nodes[a.0].values.clone();
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] += self.nodes[row.0].values[j];
            }
        }
        self.push(r, c, values, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let values = self.nodes[a.0].values.iter().map(|&x| x * factor).collect();
        self.push(self.rows(a), self.cols(a), values, Op::Scale(a, factor))
    }

    pub fn scale_by_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s.0].values.len(), 1, "scale factor must be 1x1");
        let f = self.nodes[s.0].values[0];
        let values = self.nodes[a.0].values.iter().map(|&x| x * f).collect();
        self.push(self.rows(a), self.cols(a), values, Op::ScaleByScalar(a, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let values = self.nodes[a.0].values.iter().map(|&x| sigmoid(x)).collect();
        self.push(self.rows(a), self.cols(a), values, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let values = self.nodes[a.0].values.iter().map(|&x| x.tanh()).collect();
        self.push(self.rows(a), self.cols(a), values, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        self.push(self.rows(a), self.cols(a), values, Op::Relu(a))
    }

    /// Row-wise max-subtracted softmax. Masked entries get exactly zero
    /// weight. Every row must keep at least one active entry.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        if let Some(m) = &mask {
            assert_eq!(m.len(), r * c, "softmax mask shape mismatch");
        }
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[a.0].values[i * c..(i + 1) * c];
            let active = |j: usize| mask.as_ref().map_or(true, |m| m[i * c + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if active(j) && row[j] > max {
                    max = row[j];
                }
            }
            assert!(
                max > f64::NEG_INFINITY,
                "softmax row {i} has no active entries"
            );
            let mut sum = 0.0;
            for j in 0..c {
                if active(j) {
                    let e = (row[j] - max).exp();
                    values[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                values[i * c + j] /= sum;
            }
        }
        self.push(r, c, values, Op::SoftmaxRows { input: a, mask })
    }

    pub fn layer_norm_rows(&mut self, a: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!((self.rows(gain), self.cols(gain)), (1, c), "gain shape");
        assert_eq!((self.rows(bias), self.cols(bias)), (1, c), "bias shape");
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[a.0].values[i * c..(i + 1) * c];
            let (mean, inv) = row_stats(row, eps);
            for j in 0..c {
                let xhat = (row[j] - mean) * inv;
                values[i * c + j] =
                    xhat * self.nodes[gain.0].values[j] + self.nodes[bias.0].values[j];
            }
        }
        self.push(
            r,
            c,
            values,
            Op::LayerNormRows {
                input: a,
                gain,
                bias,
                eps,
            },
        )
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (v, d) = (self.rows(table), self.cols(table));
        let mut values = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            values.extend_from_slice(&self.nodes[table.0].values[id * d..(id + 1) * d]);
        }
        self.push(
            ids.len(),
            d,
            values,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.cols(parts[0]);
        let mut values = Vec::new();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.cols(p), c, "concat_rows width mismatch");
            rows += self.rows(p);
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        self.push(rows, c, values, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert!(start + len <= r, "slice_rows out of range");
        let values = self.nodes[a.0].values[start * c..(start + len) * c].to_vec();
        self.push(len, c, values, Op::SliceRows { input: a, start })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert!(start + len <= c, "slice_cols out of range");
        let mut values = Vec::with_capacity(r * len);
        for i in 0..r {
            values.extend_from_slice(&self.nodes[a.0].values[i * c + start..i * c + start + len]);
        }
        self.push(r, len, values, Op::SliceCols { input: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.rows(parts[0]);
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut values = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                assert_eq!(self.rows(p), r, "concat_cols height mismatch");
                let c = self.cols(p);
                values.extend_from_slice(&self.nodes[p.0].values[i * c..(i + 1) * c]);
            }
        }
        self.push(r, total, values, Op::ConcatCols(parts.to_vec()))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = self.nodes[a.0].values[i * c + j];
            }
        }
        self.push(c, r, values, Op::Transpose(a))
    }

    /// Teacher-forced negative log-likelihood straight from probabilities:
    /// sum over rows t of -ln(probs[t, targets[t]]).
    pub fn nll_from_probs(&mut self, probs: NodeId, targets: &[usize]) -> NodeId {
        let (r, c) = (self.rows(probs), self.cols(probs));
        assert_eq!(targets.len(), r, "one target per row");
        let mut loss = 0.0;
        for (t, &tgt) in targets.iter().enumerate() {
            assert!(tgt < c, "target id out of range");
            loss -= self.nodes[probs.0].values[t * c + tgt].ln();
        }
        self.push(
            1,
            1,
            vec![loss],
            Op::NllFromProbs {
                probs,
                targets: targets.to_vec(),
            },
        )
    }

    /// Scatter columns of `a` into a wider matrix: out[i, cols[j]] += a[i, j].
    pub fn scatter_add_cols(&mut self, a: NodeId, cols: &[usize], width: usize) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!(cols.len(), c, "one output column per input column");
        let mut values = vec![0.0; r * width];
        for i in 0..r {
            for (j, &dst) in cols.iter().enumerate() {
                assert!(dst < width, "scatter column out of range");
                values[i * width + dst] += self.nodes[a.0].values[i * c + j];
            }
        }
        self.push(
            r,
            width,
            values,
            Op::ScatterAddCols {
                input: a,
                cols: cols.to_vec(),
            },
        )
    }

    /// Multiply each row i of `a` by the scalar `s[i]`.
    pub fn mul_col(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!((self.rows(s), self.cols(s)), (r, 1), "column factor shape");
        let mut values = self.nodes[a.0].values.clone();
        for i in 0..r {
            let f = self.nodes[s.0].values[i];
            for j in 0..c {
                values[i * c + j] *= f;
            }
        }
        self.push(r, c, values, Op::MulCol(a, s))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].values.iter().sum();
        self.push(1, 1, vec![total], Op::SumAll(a))
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-rate). `rate == 0`
    /// returns the input unchanged.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut impl rand::Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        if rate == 0.0 {
            return a;
        }
        let n = self.nodes[a.0].values.len();
        let keep: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= rate).collect();
        let scale = 1.0 / (1.0 - rate);
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x * scale } else { 0.0 })
            .collect();
        self.push(
            self.rows(a),
            self.cols(a),
            values,
            Op::Dropout {
                input: a,
                keep,
                scale,
            },
        )
    }

    /// Backpropagate from a 1x1 loss node with upstream gradient `seed`.
    pub fn backward(&mut self, loss: NodeId, seed: f64) {
        assert_eq!(self.nodes[loss.0].values.len(), 1, "loss must be scalar");
        self.nodes[loss.0].grad[0] += seed;
        for idx in (0..=loss.0).rev() {
            let op = self.nodes[idx].op.clone();
            let grad = std::mem::take(&mut self.nodes[idx].grad);
            let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
            match op {
                Op::Leaf { .. } => {}
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = cols;
                    // dA += dC * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grad[i * n + j] * self.nodes[b.0].values[p * n + j];
                            }
                            self.nodes[a.0].grad[i * k + p] += s;
                        }
                    }
                    // dB += A^T * dC
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += self.nodes[a.0].values[i * k + p] * grad[i * n + j];
                            }
                            self.nodes[b.0].grad[p * n + j] += s;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (g, &d) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                    for (g, &d) in self.nodes[b.0].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                }
                Op::Sub(a, b) => {
                    for (g, &d) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                    for (g, &d) in self.nodes[b.0].grad.iter_mut().zip(&grad) {
                        *g -= d;
                    }
                }
                Op::Mul(a, b) => {
                    for i in 0..grad.len() {
                        let av = self.nodes[a.0].values[i];
                        let bv = self.nodes[b.0].values[i];
                        self.nodes[a.0].grad[i] += grad[i] * bv;
                        self.nodes[b.0].grad[i] += grad[i] * av;
                    }
                }
                Op::AddRow(a, row) => {
                    for (g, &d) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                    for i in 0..rows {
                        for j in 0..cols {
                            self.nodes[row.0].grad[j] += grad[i * cols + j];
                        }
                    }
                }
                Op::Scale(a, f) => {
                    for (g, &d) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += d * f;
                    }
                }
                Op::ScaleByScalar(a, s) => {
                    let f = self.nodes[s.0].values[0];
                    let mut ds = 0.0;
                    for i in 0..grad.len() {
                        self.nodes[a.0].grad[i] += grad[i] * f;
                        ds += grad[i] * self.nodes[a.0].values[i];
                    }
                    self.nodes[s.0].grad[0] += ds;
                }
                Op::Sigmoid(a) => {
                    for i in 0..grad.len() {
                        let y = self.nodes[idx].values[i];
                        self.nodes[a.0].grad[i] += grad[i] * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    for i in 0..grad.len() {
                        let y = self.nodes[idx].values[i];
                        self.nodes[a.0].grad[i] += grad[i] * (1.0 - y * y);
                    }
                }
                Op::Relu(a) => {
                    for i in 0..grad.len() {
                        if self.nodes[a.0].values[i] > 0.0 {
                            self.nodes[a.0].grad[i] += grad[i];
                        }
                    }
                }
                Op::SoftmaxRows { input, mask } => {
                    for i in 0..rows {
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += grad[i * cols + j] * self.nodes[idx].values[i * cols + j];
                        }
                        for j in 0..cols {
                            let active = mask.as_ref().map_or(true, |m| m[i * cols + j]);
                            if active {
                                let y = self.nodes[idx].values[i * cols + j];
                                self.nodes[input.0].grad[i * cols + j] +=
                                    y * (grad[i * cols + j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNormRows {
                    input,
                    gain,
                    bias,
                    eps,
                } => {
                    for i in 0..rows {
                        let row: Vec<f64> =
                            self.nodes[input.0].values[i * cols..(i + 1) * cols].to_vec();
                        let (mean, inv) = row_stats(&row, eps);
                        let mut dxhat = vec![0.0; cols];
                        let mut dxhat_sum = 0.0;
                        let mut dxhat_xhat_sum = 0.0;
                        for j in 0..cols {
                            let xhat = (row[j] - mean) * inv;
                            let dy = grad[i * cols + j];
                            self.nodes[bias.0].grad[j] += dy;
                            self.nodes[gain.0].grad[j] += dy * xhat;
                            dxhat[j] = dy * self.nodes[gain.0].values[j];
                            dxhat_sum += dxhat[j];
                            dxhat_xhat_sum += dxhat[j] * xhat;
                        }
                        let n = cols as f64;
                        for j in 0..cols {
                            let xhat = (row[j] - mean) * inv;
                            self.nodes[input.0].grad[i * cols + j] +=
                                inv * (dxhat[j] - dxhat_sum / n - xhat * dxhat_xhat_sum / n);
                        }
                    }
                }
                Op::Embed { table, ids } => {
                    let d = cols;
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            self.nodes[table.0].grad[id * d + j] += grad[i * d + j];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in &parts {
                        let pr = self.nodes[p.0].rows;
                        for i in 0..pr * cols {
                            self.nodes[p.0].grad[i] += grad[offset * cols + i];
                        }
                        offset += pr;
                    }
                }
                Op::SliceRows { input, start } => {
                    let c = cols;
                    for i in 0..rows {
                        for j in 0..c {
                            self.nodes[input.0].grad[(start + i) * c + j] += grad[i * c + j];
                        }
                    }
                }
                Op::SliceCols { input, start } => {
                    let full = self.nodes[input.0].cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            self.nodes[input.0].grad[i * full + start + j] += grad[i * cols + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    for i in 0..rows {
                        let mut offset = 0;
                        for &p in &parts {
                            let pc = self.nodes[p.0].cols;
                            for j in 0..pc {
                                self.nodes[p.0].grad[i * pc + j] += grad[i * cols + offset + j];
                            }
                            offset += pc;
                        }
                    }
                }
                Op::Transpose(a) => {
                    // idx is (cols_a, rows_a); map back
                    let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    for i in 0..ar {
                        for j in 0..ac {
                            self.nodes[a.0].grad[i * ac + j] += grad[j * ar + i];
                        }
                    }
                }
                Op::NllFromProbs { probs, targets } => {
                    let c = self.nodes[probs.0].cols;
                    for (t, &tgt) in targets.iter().enumerate() {
                        let p = self.nodes[probs.0].values[t * c + tgt];
                        self.nodes[probs.0].grad[t * c + tgt] -= grad[0] / p;
                    }
                }
                Op::ScatterAddCols { input, cols: map } => {
                    let in_c = self.nodes[input.0].cols;
                    for i in 0..rows {
                        for (j, &dst) in map.iter().enumerate() {
                            self.nodes[input.0].grad[i * in_c + j] += grad[i * cols + dst];
                        }
                    }
                }
                Op::MulCol(a, s) => {
                    for i in 0..rows {
                        let f = self.nodes[s.0].values[i];
                        let mut ds = 0.0;
                        for j in 0..cols {
                            self.nodes[a.0].grad[i * cols + j] += grad[i * cols + j] * f;
                            ds += grad[i * cols + j] * self.nodes[a.0].values[i * cols + j];
                        }
                        self.nodes[s.0].grad[i] += ds;
                    }
                }
                Op::SumAll(a) => {
                    for g in self.nodes[a.0].grad.iter_mut() {
                        *g += grad[0];
                    }
                }
                Op::Dropout { input, keep, scale } => {
                    for i in 0..grad.len() {
                        if keep[i] {
                            self.nodes[input.0].grad[i] += grad[i] * scale;
                        }
                    }
                }
            }
            self.nodes[idx].grad = grad;
        }
    }

    /// Add gradients of parameter leaves back into the parameter set,
    /// scaled by `factor`. Allocates gradient buffers as needed.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet, factor: f64) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(idx) } = node.op {
                let t = params.at_mut(idx);
                let g = t.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
                for (dst, &src) in g.iter_mut().zip(&node.grad) {
                    *dst += src * factor;
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
}
