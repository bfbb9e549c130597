//! Differentiable compute kernel: tensors, the autodiff graph, standard
//! layers, and the Adam optimizer. Everything downstream (the translation
//! models, the constraint memories, the decoders) is built on this module.

pub mod graph;

pub use graph::{Graph, NodeId};

use crate::error::{Error, Result};
use indexmap::IndexMap;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Dense row-major array of 64-bit floats with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; len],
            grad: None,
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// View as a matrix: rank-1 tensors are a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            r => panic!("rank-{r} tensor has no matrix view"),
        }
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }
}

/// Ordered, named collection of learnable tensors.
///
/// Iteration order is insertion order, which makes checkpoints and optimizer
/// state deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> usize {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter `{name}`"
        );
        let idx = self.entries.len();
        self.entries.insert(name.to_string(), tensor);
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn at(&self, index: usize) -> &Tensor {
        self.entries.get_index(index).expect("param index").1
    }

    pub fn at_mut(&mut self, index: usize) -> &mut Tensor {
        self.entries.get_index_mut(index).expect("param index").1
    }

    pub fn name_at(&self, index: usize) -> &str {
        self.entries.get_index(index).expect("param index").0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.grad = None;
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }
}

/// Adam optimizer state: one pair of moment buffers per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            second_moment: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first_moment[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second_moment[index]
    }
}

/// One bias-corrected Adam update over every parameter in the set.
/// Every parameter must carry a populated gradient buffer.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    assert_eq!(state.first_moment.len(), params.len(), "state/param mismatch");
    for i in 0..params.len() {
        if params.at(i).grad.is_none() {
            return Err(Error::MissingGradient(params.name_at(i).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let tensor = params.at_mut(i);
        let grad = tensor.grad.as_ref().expect("checked above").clone();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..grad.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * grad[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * grad[j] * grad[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            tensor.values[j] -= state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Numerically stable softmax over a vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Layer normalization of a vector: (v - mean)/sqrt(var + eps) * gain + bias.
pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if v.len() != gain.len() || v.len() != bias.len() {
        return Err(Error::ShapeMismatch {
            context: "layer_norm",
            expected: format!("three vectors of length {}", v.len()),
            got: format!("gain {}, bias {}", gain.len(), bias.len()),
        });
    }
    if v.len() < 2 {
        return Err(Error::ShapeMismatch {
            context: "layer_norm",
            expected: "length >= 2".to_string(),
            got: format!("{}", v.len()),
        });
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    Ok(v.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&x, (&g, &b))| (x - mean) * inv * g + b)
        .collect())
}

/// Negative log-likelihood of `target` under a probability vector, in nats.
pub fn cross_entropy(dist: &[f64], target: usize) -> Result<f64> {
    if target >= dist.len() {
        return Err(Error::IndexOutOfRange {
            context: "cross_entropy target",
            index: target,
            size: dist.len(),
        });
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy distribution",
            expected: "sum 1 within 1e-6".to_string(),
            got: format!("sum {sum}"),
        });
    }
    Ok(-dist[target].ln())
}

/// Projection weights for one multi-head attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionParams {
    /// Identity projections with zero biases; useful for hand-checked tests.
    pub fn identity(dim: usize) -> Self {
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        let mat = Tensor::from_values(&[dim, dim], eye);
        let zero = Tensor::zeros(&[dim]);
        AttentionParams {
            wq: mat.clone(),
            bq: zero.clone(),
            wk: mat.clone(),
            bk: zero.clone(),
            wv: mat.clone(),
            bv: zero.clone(),
            wo: mat,
            bo: zero,
        }
    }
}

/// Scaled dot-product multi-head attention with learned projections.
///
/// `mask[i * key_rows + j] == false` removes key j from query i's softmax.
/// A query row with every key masked is rejected as degenerate.
pub fn multi_head_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: &[bool],
    heads: usize,
    params: &AttentionParams,
) -> Result<Tensor> {
    let (qr, d) = queries.matrix_shape();
    let (kr, kd) = keys.matrix_shape();
    let (vr, vd) = values.matrix_shape();
    if kr != vr {
        return Err(Error::ShapeMismatch {
            context: "multi_head_attention key/value rows",
            expected: format!("{kr}"),
            got: format!("{vr}"),
        });
    }
    if kd != d || vd != d {
        return Err(Error::ShapeMismatch {
            context: "multi_head_attention model dim",
            expected: format!("{d}"),
            got: format!("keys {kd}, values {vd}"),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::HeadsIndivisible { dim: d, heads });
    }
    if mask.len() != qr * kr {
        return Err(Error::ShapeMismatch {
            context: "multi_head_attention mask",
            expected: format!("{} entries", qr * kr),
            got: format!("{}", mask.len()),
        });
    }
    for i in 0..qr {
        if !mask[i * kr..(i + 1) * kr].iter().any(|&a| a) {
            return Err(Error::FullyMaskedRow { row: i });
        }
    }

    let mut g = Graph::new();
    let q = g.constant(qr, d, queries.values.clone());
    let k = g.constant(kr, d, keys.values.clone());
    let v = g.constant(vr, d, values.values.clone());
    let weights = AttentionNodes::from_params(&mut g, params);
    let out = attention_forward(&mut g, q, k, v, Some(mask), heads, &weights);
    Ok(Tensor::from_values(&[qr, d], g.values(out).to_vec()))
}

/// Attention projection nodes inside a graph.
pub struct AttentionNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

impl AttentionNodes {
    fn from_params(g: &mut Graph, p: &AttentionParams) -> Self {
        let (d, _) = p.wq.matrix_shape();
        let load = |g: &mut Graph, t: &Tensor| {
            let (r, c) = t.matrix_shape();
            g.constant(r, c, t.values.clone())
        };
        let _ = d;
        AttentionNodes {
            wq: load(g, &p.wq),
            bq: load(g, &p.bq),
            wk: load(g, &p.wk),
            bk: load(g, &p.bk),
            wv: load(g, &p.wv),
            bv: load(g, &p.bv),
            wo: load(g, &p.wo),
            bo: load(g, &p.bo),
        }
    }
}

/// Multi-head attention built from graph nodes. `mask` is row-major
/// (query rows x key rows); `None` means every key is visible.
pub fn attention_forward(
    g: &mut Graph,
    queries: NodeId,
    keys: NodeId,
    values: NodeId,
    mask: Option<&[bool]>,
    heads: usize,
    w: &AttentionNodes,
) -> NodeId {
    let d = g.cols(queries);
    assert_eq!(d % heads, 0, "dim not divisible by heads");
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let qp = g.matmul(queries, w.wq);
    let qp = g.add_row(qp, w.bq);
    let kp = g.matmul(keys, w.wk);
    let kp = g.add_row(kp, w.bk);
    let vp = g.matmul(values, w.wv);
    let vp = g.add_row(vp, w.bv);

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(qp, h * head_dim, head_dim);
        let kh = g.slice_cols(kp, h * head_dim, head_dim);
        let vh = g.slice_cols(vp, h * head_dim, head_dim);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores, mask.map(|m| m.to_vec()));
        head_outputs.push(g.matmul(attn, vh));
    }
    let concat = g.concat_cols(&head_outputs);
    let out = g.matmul(concat, w.wo);
    g.add_row(out, w.bo)
}

/// Compares analytic gradients against central finite differences and
/// returns the worst relative error over every scalar parameter.
///
/// `grad_fn` must populate gradient buffers (and return the loss);
/// `loss_fn` must evaluate the same deterministic loss without touching
/// gradients.
pub fn finite_difference_check(
    params: &mut ParamSet,
    epsilon: f64,
    mut loss_fn: impl FnMut(&ParamSet) -> Result<f64>,
    mut grad_fn: impl FnMut(&mut ParamSet) -> Result<f64>,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite difference epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    if params.is_empty() {
        return Ok(0.0);
    }
    params.zero_grads();
    let base = grad_fn(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("finite_difference_check loss"));
    }
    let analytic: Vec<Vec<f64>> = (0..params.len())
        .map(|i| params.at(i).grad.clone().expect("grad_fn populated grads"))
        .collect();

    let mut worst = 0.0_f64;
    for i in 0..params.len() {
        for j in 0..params.at(i).len() {
            let original = params.at(i).values[j];
            params.at_mut(i).values[j] = original + epsilon;
            let plus = loss_fn(params)?;
            params.at_mut(i).values[j] = original - epsilon;
            let minus = loss_fn(params)?;
            params.at_mut(i).values[j] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("finite_difference_check loss"));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-6);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
