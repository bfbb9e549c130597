//! Graph construction for every model variant: source encoding, constraint
//! memory encoding, the teacher-forced batch decoder used for training, and
//! the incremental decoder used for search.
//!
//! Both decoding paths are built from the same graph ops, so teacher-forced
//! distributions and step-by-step distributions agree to float precision.
//! The incremental path keeps projected key/value histories per layer and
//! per-session projections of the source and memory rows, which is what
//! keeps the soft-constraint overhead at decode time small.

use super::{ConstraintEncoderKind, DecoderState, EncodedSource, IntegratorKind, Model};
use crate::cmem::{
    integrate_copy_projected, integrate_gate_projected, ConstraintMemory, ConstraintSet,
    CopyProjection, GateProjection, MemoryLayout,
};
use crate::error::{Error, Result};
use crate::tensor::{attention_forward, AttentionNodes, Graph, NodeId, Tensor, LAYER_NORM_EPS};
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;

/// Sinusoidal position rows for positions start..start+rows.
fn sinusoid(start: usize, rows: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * d);
    for pos in start..start + rows {
        for j in 0..d {
            let pair = (j / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            out.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

struct Forward<'m, 'r> {
    g: Graph,
    model: &'m Model,
    leaves: HashMap<usize, NodeId>,
    dropout: Option<&'r mut ChaCha20Rng>,
}

impl<'m, 'r> Forward<'m, 'r> {
    fn new(model: &'m Model, dropout: Option<&'r mut ChaCha20Rng>) -> Self {
        Forward {
            g: Graph::new(),
            model,
            leaves: HashMap::new(),
            dropout,
        }
    }

    /// Leaf node for a named parameter, created once per graph.
    fn p(&mut self, name: &str) -> NodeId {
        let idx = self
            .model
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(&id) = self.leaves.get(&idx) {
            return id;
        }
        let id = self.g.param(&self.model.params, idx);
        self.leaves.insert(idx, id);
        id
    }

    fn maybe_dropout(&mut self, node: NodeId) -> NodeId {
        let rate = self.model.config.dropout;
        match &mut self.dropout {
            Some(rng) if rate > 0.0 => self.g.dropout(node, rate, rng),
            _ => node,
        }
    }

    fn attn(&mut self, prefix: &str) -> AttentionNodes {
        AttentionNodes {
            wq: self.p(&format!("{prefix}.wq")),
            bq: self.p(&format!("{prefix}.bq")),
            wk: self.p(&format!("{prefix}.wk")),
            bk: self.p(&format!("{prefix}.bk")),
            wv: self.p(&format!("{prefix}.wv")),
            bv: self.p(&format!("{prefix}.bv")),
            wo: self.p(&format!("{prefix}.wo")),
            bo: self.p(&format!("{prefix}.bo")),
        }
    }

    fn layer_norm(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let gain = self.p(&format!("{prefix}.gain"));
        let bias = self.p(&format!("{prefix}.bias"));
        self.g.layer_norm_rows(x, gain, bias, LAYER_NORM_EPS)
    }

    fn feed_forward(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let w1 = self.p(&format!("{prefix}.w1"));
        let b1 = self.p(&format!("{prefix}.b1"));
        let w2 = self.p(&format!("{prefix}.w2"));
        let b2 = self.p(&format!("{prefix}.b2"));
        let h = self.g.matmul(x, w1);
        let h = self.g.add_row(h, b1);
        let h = self.g.relu(h);
        let h = self.g.matmul(h, w2);
        self.g.add_row(h, b2)
    }

    /// Embedding + sqrt(d) scaling + sinusoidal positions.
    fn embed_positions(&mut self, table: &str, ids: &[u32], start_pos: usize) -> NodeId {
        let d = self.model.config.model_dim;
        let tnode = self.p(table);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = self.g.embed(tnode, &idx);
        let scaled = self.g.scale(e, (d as f64).sqrt());
        let pos = self.g.constant(ids.len(), d, sinusoid(start_pos, ids.len(), d));
        self.g.add(scaled, pos)
    }

    /// Post-LN encoder stack (`prefix` = "enc" or "cmem.enc").
    fn encoder_stack(&mut self, prefix: &str, mut x: NodeId) -> NodeId {
        let heads = self.model.config.heads;
        for l in 0..self.model.config.encoder_layers {
            let base = format!("{prefix}.{l}");
            let attn = self.attn(&format!("{base}.self"));
            let a = attention_forward(&mut self.g, x, x, x, None, heads, &attn);
            let a = self.maybe_dropout(a);
            let sum = self.g.add(x, a);
            x = self.layer_norm(&format!("{base}.ln1"), sum);
            let f = self.feed_forward(&format!("{base}.ff"), x);
            let f = self.maybe_dropout(f);
            let sum = self.g.add(x, f);
            x = self.layer_norm(&format!("{base}.ln2"), sum);
        }
        x
    }

    /// Memory slot rows followed by the sentinel row: (S+1) x d.
    fn memory_rows(&mut self, layout: &MemoryLayout) -> NodeId {
        let sentinel = self.p("cmem.sentinel");
        if layout.slots() == 0 {
            return sentinel;
        }
        let ids: Vec<u32> = layout.slot_token.clone();
        match self.model.config.constraint_encoder {
            ConstraintEncoderKind::Shallow => {
                // Slots carry the shared feeding embeddings at the same
                // sqrt(d) scale they enter the decoder with; raw embeddings
                // would be an order of magnitude below the layer-normed
                // hidden states and the integrators would barely see them.
                let d = self.model.config.model_dim;
                let table = self.p("tgt_embed");
                let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
                let rows = self.g.embed(table, &idx);
                let rows = self.g.scale(rows, (d as f64).sqrt());
                self.g.concat_rows(&[rows, sentinel])
            }
            ConstraintEncoderKind::Deep => {
                let x = self.embed_positions("tgt_embed", &ids, 0);
                let x = self.maybe_dropout(x);
                let encoded = self.encoder_stack("cmem.enc", x);
                self.g.concat_rows(&[encoded, sentinel])
            }
            ConstraintEncoderKind::None => unreachable!("memory_rows without encoder"),
        }
    }

    /// Generator head: softmax(h * W + b) over the target vocabulary.
    fn output_probs(&mut self, h: NodeId) -> NodeId {
        let w = self.p("out.w");
        let b = self.p("out.b");
        let logits = self.g.matmul(h, w);
        let logits = self.g.add_row(logits, b);
        self.g.softmax_rows(logits, None)
    }

    fn gate_projection(&mut self, mem_rows: NodeId) -> GateProjection {
        let project = |fwd: &mut Self, f: &str| {
            let wk = fwd.p(&format!("cmem.gate.{f}.wk"));
            let wv = fwd.p(&format!("cmem.gate.{f}.wv"));
            let k = fwd.g.matmul(mem_rows, wk);
            let v = fwd.g.matmul(mem_rows, wv);
            (k, v)
        };
        let (f1_k, f1_v) = project(self, "f1");
        let (f2_k, f2_v) = project(self, "f2");
        GateProjection {
            f1_wq: self.p("cmem.gate.f1.wq"),
            f1_k,
            f1_v,
            f2_wq: self.p("cmem.gate.f2.wq"),
            f2_k,
            f2_v,
            f2_bias: self.p("cmem.gate.f2_bias"),
        }
    }

    fn copy_projection(&mut self, mem_rows: NodeId) -> CopyProjection {
        let score_wk = self.p("cmem.copy.score.wk");
        let f2_wk = self.p("cmem.copy.f2.wk");
        let f2_wv = self.p("cmem.copy.f2.wv");
        let score_k = self.g.matmul(mem_rows, score_wk);
        let f2_k = self.g.matmul(mem_rows, f2_wk);
        let f2_v = self.g.matmul(mem_rows, f2_wv);
        CopyProjection {
            score_wq: self.p("cmem.copy.score.wq"),
            score_k,
            f2_wq: self.p("cmem.copy.f2.wq"),
            f2_k,
            f2_v,
            gate_w: self.p("cmem.copy.gate_w"),
            gate_b: self.p("cmem.copy.gate_b"),
        }
    }
}

fn check_ids(ids: &[u32], vocab: usize, context: &'static str) -> Result<()> {
    for &id in ids {
        if id as usize >= vocab {
            return Err(Error::IndexOutOfRange {
                context,
                index: id as usize,
                size: vocab,
            });
        }
    }
    Ok(())
}

fn check_source(model: &Model, x: &[u32]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyInput("source sentence"));
    }
    if x.len() > model.config.max_len {
        return Err(Error::LengthOverflow {
            len: x.len(),
            max: model.config.max_len,
        });
    }
    check_ids(x, model.config.src_vocab, "source token")
}

fn check_constraints(model: &Model, c: &ConstraintSet) -> Result<()> {
    for constraint in c.iter() {
        check_ids(&constraint.tokens, model.config.tgt_vocab, "constraint token")?;
    }
    Ok(())
}

pub(super) fn encode_source(model: &Model, x: &[u32]) -> Result<EncodedSource> {
    check_source(model, x)?;
    let mut fwd = Forward::new(model, None);
    let emb = fwd.embed_positions("src_embed", x, 0);
    let out = fwd.encoder_stack("enc", emb);
    let d = model.config.model_dim;
    let hidden = Tensor::from_values(&[x.len(), d], fwd.g.values(out).to_vec());
    Ok(EncodedSource {
        hidden,
        token_ids: x.to_vec(),
        padding_mask: vec![false; x.len()],
    })
}

pub(super) fn encode_memory(model: &Model, c: &ConstraintSet) -> Result<ConstraintMemory> {
    if !model.config.uses_memory() {
        return Err(Error::Config(
            "model variant has no constraint encoder".to_string(),
        ));
    }
    check_constraints(model, c)?;
    let layout = MemoryLayout::from_set(c);
    let mut fwd = Forward::new(model, None);
    let rows_node = fwd.memory_rows(&layout);
    let d = model.config.model_dim;
    let rows = Tensor::from_values(&[layout.rows(), d], fwd.g.values(rows_node).to_vec());
    Ok(ConstraintMemory {
        layout,
        kind: model.config.constraint_encoder,
        set: c.clone(),
        rows,
    })
}

/// Causal mask over t rows, optionally widened by per-row memory activity.
fn causal_mask(t: usize, mem_active: Option<(&[bool], usize)>) -> Vec<bool> {
    let m = mem_active.map_or(0, |(_, rows)| rows);
    let width = t + m;
    let mut mask = vec![false; t * width];
    for i in 0..t {
        for j in 0..=i {
            mask[i * width + j] = true;
        }
        if let Some((active, _)) = mem_active {
            for j in 0..m {
                mask[i * width + t + j] = active[i * m + j];
            }
        }
    }
    mask
}

/// Teacher-forced distributions for every position: builds the whole
/// training graph and returns the [T, vocab] probability node.
fn build_batch<'m, 'r>(
    model: &'m Model,
    x: &[u32],
    tgt_input: &[u32],
    c: &ConstraintSet,
    dropout: Option<&'r mut ChaCha20Rng>,
) -> Result<(Forward<'m, 'r>, NodeId)> {
    check_source(model, x)?;
    check_constraints(model, c)?;
    check_ids(tgt_input, model.config.tgt_vocab, "target token")?;
    if tgt_input.is_empty() {
        return Err(Error::EmptyInput("target sequence"));
    }
    if tgt_input.len() > model.config.max_len {
        return Err(Error::LengthOverflow {
            len: tgt_input.len(),
            max: model.config.max_len,
        });
    }

    let cfg = &model.config;
    let t = tgt_input.len();
    let mut fwd = Forward::new(model, dropout);

    let src_emb = fwd.embed_positions("src_embed", x, 0);
    let src_emb = fwd.maybe_dropout(src_emb);
    let enc_out = fwd.encoder_stack("enc", src_emb);

    // Memory rows and per-timestep slot activity. Row t sees the prefix fed
    // up to and including input t (bos plus the reference so far).
    let mem = if cfg.uses_memory() {
        let layout = MemoryLayout::from_set(c);
        let mut active = Vec::with_capacity(t * layout.rows());
        for row in 0..t {
            active.extend(layout.active_for_prefix(
                cfg.constraint_encoder,
                c,
                &tgt_input[..=row],
            ));
        }
        let rows_node = fwd.memory_rows(&layout);
        Some((layout, rows_node, active))
    } else {
        None
    };

    let emb = fwd.embed_positions("tgt_embed", tgt_input, 0);
    let mut h = fwd.maybe_dropout(emb);
    let heads = cfg.heads;
    for l in 0..cfg.decoder_layers {
        let base = format!("dec.{l}");
        let (kv, mask) = match (&mem, cfg.integrator) {
            (Some((layout, rows_node, active)), IntegratorKind::Attn) => {
                let kv = fwd.g.concat_rows(&[h, *rows_node]);
                (kv, causal_mask(t, Some((active, layout.rows()))))
            }
            _ => (h, causal_mask(t, None)),
        };
        let self_attn = fwd.attn(&format!("{base}.self"));
        let a = attention_forward(&mut fwd.g, h, kv, kv, Some(&mask), heads, &self_attn);
        let a = fwd.maybe_dropout(a);
        let sum = fwd.g.add(h, a);
        h = fwd.layer_norm(&format!("{base}.ln1"), sum);

        let cross_attn = fwd.attn(&format!("{base}.cross"));
        let cross = attention_forward(&mut fwd.g, h, enc_out, enc_out, None, heads, &cross_attn);
        let cross = fwd.maybe_dropout(cross);
        let sum = fwd.g.add(h, cross);
        h = fwd.layer_norm(&format!("{base}.ln2"), sum);

        let f = fwd.feed_forward(&format!("{base}.ff"), h);
        let f = fwd.maybe_dropout(f);
        let sum = fwd.g.add(h, f);
        h = fwd.layer_norm(&format!("{base}.ln3"), sum);
    }

    let probs = match (&mem, cfg.integrator) {
        (Some((_, rows_node, active)), IntegratorKind::Gate) => {
            let proj = fwd.gate_projection(*rows_node);
            let hhat = integrate_gate_projected(&mut fwd.g, h, &proj, active);
            fwd.output_probs(hhat)
        }
        (Some((layout, rows_node, active)), IntegratorKind::Copy) => {
            let p_gen = fwd.output_probs(h);
            let proj = fwd.copy_projection(*rows_node);
            integrate_copy_projected(
                &mut fwd.g,
                p_gen,
                h,
                layout,
                active,
                &proj,
                cfg.tgt_vocab,
            )
        }
        _ => fwd.output_probs(h),
    };
    Ok((fwd, probs))
}

pub(super) fn nll_graph(
    model: &Model,
    x: &[u32],
    r: &[u32],
    c: &ConstraintSet,
    dropout: Option<&mut ChaCha20Rng>,
) -> Result<(Graph, NodeId)> {
    if r.is_empty() {
        return Err(Error::EmptyInput("reference"));
    }
    debug_assert_eq!(
        *r.last().unwrap(),
        crate::corpus::EOS,
        "reference must end with eos"
    );
    let mut tgt_input = Vec::with_capacity(r.len());
    tgt_input.push(crate::corpus::BOS);
    tgt_input.extend_from_slice(&r[..r.len() - 1]);
    let (mut fwd, probs) = build_batch(model, x, &tgt_input, c, dropout)?;
    let targets: Vec<usize> = r.iter().map(|&i| i as usize).collect();
    let loss = fwd.g.nll_from_probs(probs, &targets);
    Ok((fwd.g, loss))
}

pub(super) fn batch_distributions(
    model: &Model,
    x: &[u32],
    r: &[u32],
    c: &ConstraintSet,
) -> Result<Vec<Vec<f64>>> {
    if r.is_empty() {
        return Err(Error::EmptyInput("reference"));
    }
    let mut tgt_input = Vec::with_capacity(r.len());
    tgt_input.push(crate::corpus::BOS);
    tgt_input.extend_from_slice(&r[..r.len() - 1]);
    let (fwd, probs) = build_batch(model, x, &tgt_input, c, None)?;
    let v = model.config.tgt_vocab;
    Ok(fwd
        .g
        .values(probs)
        .chunks(v)
        .map(|row| row.to_vec())
        .collect())
}

/// Per-session projections that stay fixed across decode steps.
#[derive(Debug, Clone, Default)]
pub(crate) struct SessionCache {
    /// Per decoder layer: projected source keys and values (with biases).
    cross: Vec<(Vec<f64>, Vec<f64>)>,
    /// Per decoder layer: projected memory keys/values for the
    /// self-attention integrator.
    mem_self: Vec<(Vec<f64>, Vec<f64>)>,
    /// f1 k, f1 v, f2 k, f2 v over memory rows.
    gate: Option<[Vec<f64>; 4]>,
    /// score k, f2 k, f2 v over memory rows.
    copy: Option<[Vec<f64>; 3]>,
}

fn build_session_cache(
    model: &Model,
    src: &EncodedSource,
    memory: Option<&ConstraintMemory>,
) -> SessionCache {
    let cfg = &model.config;
    let d = cfg.model_dim;
    let mut fwd = Forward::new(model, None);
    let src_node = fwd
        .g
        .constant(src.token_ids.len(), d, src.hidden.values.clone());
    let mem_node = memory.map(|m| fwd.g.constant(m.layout.rows(), d, m.rows.values.clone()));

    let mut cache = SessionCache::default();
    for l in 0..cfg.decoder_layers {
        let base = format!("dec.{l}");
        let wk = fwd.p(&format!("{base}.cross.wk"));
        let bk = fwd.p(&format!("{base}.cross.bk"));
        let wv = fwd.p(&format!("{base}.cross.wv"));
        let bv = fwd.p(&format!("{base}.cross.bv"));
        let k = fwd.g.matmul(src_node, wk);
        let k = fwd.g.add_row(k, bk);
        let v = fwd.g.matmul(src_node, wv);
        let v = fwd.g.add_row(v, bv);
        cache
            .cross
            .push((fwd.g.values(k).to_vec(), fwd.g.values(v).to_vec()));

        if let Some(mem_node) = mem_node {
            if cfg.integrator == IntegratorKind::Attn {
                let wk = fwd.p(&format!("{base}.self.wk"));
                let bk = fwd.p(&format!("{base}.self.bk"));
                let wv = fwd.p(&format!("{base}.self.wv"));
                let bv = fwd.p(&format!("{base}.self.bv"));
                let k = fwd.g.matmul(mem_node, wk);
                let k = fwd.g.add_row(k, bk);
                let v = fwd.g.matmul(mem_node, wv);
                let v = fwd.g.add_row(v, bv);
                cache
                    .mem_self
                    .push((fwd.g.values(k).to_vec(), fwd.g.values(v).to_vec()));
            }
        }
    }
    if let Some(mem_node) = mem_node {
        match cfg.integrator {
            IntegratorKind::Gate => {
                let mut parts = Vec::new();
                for (f, side) in [("f1", "wk"), ("f1", "wv"), ("f2", "wk"), ("f2", "wv")] {
                    let w = fwd.p(&format!("cmem.gate.{f}.{side}"));
                    let p = fwd.g.matmul(mem_node, w);
                    parts.push(fwd.g.values(p).to_vec());
                }
                cache.gate = Some([
                    parts[0].clone(),
                    parts[1].clone(),
                    parts[2].clone(),
                    parts[3].clone(),
                ]);
            }
            IntegratorKind::Copy => {
                let mut parts = Vec::new();
                for name in ["cmem.copy.score.wk", "cmem.copy.f2.wk", "cmem.copy.f2.wv"] {
                    let w = fwd.p(name);
                    let p = fwd.g.matmul(mem_node, w);
                    parts.push(fwd.g.values(p).to_vec());
                }
                cache.copy = Some([parts[0].clone(), parts[1].clone(), parts[2].clone()]);
            }
            _ => {}
        }
    }
    cache
}

/// Multi-head attention where keys/values are already projected.
fn attention_cached(
    g: &mut Graph,
    q_in: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&[bool]>,
    heads: usize,
    wq: NodeId,
    bq: NodeId,
    wo: NodeId,
    bo: NodeId,
) -> NodeId {
    let d = g.cols(q_in);
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = g.matmul(q_in, wq);
    let q = g.add_row(q, bq);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim);
        let kh = g.slice_cols(k, h * head_dim, head_dim);
        let vh = g.slice_cols(v, h * head_dim, head_dim);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores, mask.map(|m| m.to_vec()));
        outs.push(g.matmul(attn, vh));
    }
    let concat = g.concat_cols(&outs);
    let out = g.matmul(concat, wo);
    g.add_row(out, bo)
}

pub(super) fn decode_step(
    model: &Model,
    state: &mut DecoderState,
    src: &EncodedSource,
    prev: u32,
    memory: Option<&ConstraintMemory>,
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let d = cfg.model_dim;
    check_ids(&[prev], cfg.tgt_vocab, "previous token")?;
    if state.len() >= cfg.max_len {
        return Err(Error::LengthOverflow {
            len: state.len() + 1,
            max: cfg.max_len,
        });
    }
    if state.histories_len() != cfg.decoder_layers {
        return Err(Error::ShapeMismatch {
            context: "decoder state layers",
            expected: format!("{}", cfg.decoder_layers),
            got: format!("{}", state.histories_len()),
        });
    }

    // The sentinel-only empty memory keeps memory variants total: a missing
    // memory on a memory model behaves exactly like c = {} (encoded fresh).
    let owned_empty;
    let memory = if cfg.uses_memory() {
        match memory {
            Some(m) => Some(m),
            None => {
                owned_empty = model.encode_memory(&ConstraintSet::empty())?;
                Some(&owned_empty)
            }
        }
    } else {
        None
    };

    if state.cache.is_none() {
        state.cache = Some(build_session_cache(model, src, memory));
    }

    let t = state.len();
    let heads = cfg.heads;
    let mut fwd = Forward::new(model, None);

    // Activity of memory slots given the prefix including `prev`.
    let mem_ctx = memory.map(|m| {
        let mut prefix = state.prefix.clone();
        prefix.push(prev);
        let active = m.active_for_prefix(&prefix);
        (m, active)
    });

    let mut x = fwd.embed_positions("tgt_embed", &[prev], t);
    let mut new_k = Vec::with_capacity(cfg.decoder_layers);
    let mut new_v = Vec::with_capacity(cfg.decoder_layers);

    for l in 0..cfg.decoder_layers {
        let base = format!("dec.{l}");
        let wq = fwd.p(&format!("{base}.self.wq"));
        let bq = fwd.p(&format!("{base}.self.bq"));
        let wk = fwd.p(&format!("{base}.self.wk"));
        let bk = fwd.p(&format!("{base}.self.bk"));
        let wv = fwd.p(&format!("{base}.self.wv"));
        let bv = fwd.p(&format!("{base}.self.bv"));
        let wo = fwd.p(&format!("{base}.self.wo"));
        let bo = fwd.p(&format!("{base}.self.bo"));

        let k_row = fwd.g.matmul(x, wk);
        let k_row = fwd.g.add_row(k_row, bk);
        let v_row = fwd.g.matmul(x, wv);
        let v_row = fwd.g.add_row(v_row, bv);
        new_k.push(fwd.g.values(k_row).to_vec());
        new_v.push(fwd.g.values(v_row).to_vec());

        let (k_all, v_all, mask) = {
            let mut k_parts = Vec::with_capacity(3);
            let mut v_parts = Vec::with_capacity(3);
            if t > 0 {
                let hist_k = fwd.g.constant(t, d, state.self_keys(l).to_vec());
                let hist_v = fwd.g.constant(t, d, state.self_values(l).to_vec());
                k_parts.push(hist_k);
                v_parts.push(hist_v);
            }
            k_parts.push(k_row);
            v_parts.push(v_row);
            let mut mask = vec![true; t + 1];
            if let (Some((m, active)), IntegratorKind::Attn) = (&mem_ctx, cfg.integrator) {
                let cache = state.cache.as_ref().expect("session cache built");
                let (mk, mv) = &cache.mem_self[l];
                let mem_k = fwd.g.constant(m.layout.rows(), d, mk.clone());
                let mem_v = fwd.g.constant(m.layout.rows(), d, mv.clone());
                k_parts.push(mem_k);
                v_parts.push(mem_v);
                mask.extend_from_slice(active);
            }
            let k_all = if k_parts.len() == 1 {
                k_parts[0]
            } else {
                fwd.g.concat_rows(&k_parts)
            };
            let v_all = if v_parts.len() == 1 {
                v_parts[0]
            } else {
                fwd.g.concat_rows(&v_parts)
            };
            (k_all, v_all, mask)
        };

        let a = attention_cached(
            &mut fwd.g,
            x,
            k_all,
            v_all,
            Some(&mask),
            heads,
            wq,
            bq,
            wo,
            bo,
        );
        let sum = fwd.g.add(x, a);
        let x1 = fwd.layer_norm(&format!("{base}.ln1"), sum);

        let cache = state.cache.as_ref().expect("session cache built");
        let (ck, cv) = &cache.cross[l];
        let ck_node = fwd.g.constant(src.token_ids.len(), d, ck.clone());
        let cv_node = fwd.g.constant(src.token_ids.len(), d, cv.clone());
        let cwq = fwd.p(&format!("{base}.cross.wq"));
        let cbq = fwd.p(&format!("{base}.cross.bq"));
        let cwo = fwd.p(&format!("{base}.cross.wo"));
        let cbo = fwd.p(&format!("{base}.cross.bo"));
        let cr = attention_cached(
            &mut fwd.g,
            x1,
            ck_node,
            cv_node,
            None,
            heads,
            cwq,
            cbq,
            cwo,
            cbo,
        );
        let sum = fwd.g.add(x1, cr);
        let x2 = fwd.layer_norm(&format!("{base}.ln2"), sum);

        let f = fwd.feed_forward(&format!("{base}.ff"), x2);
        let sum = fwd.g.add(x2, f);
        x = fwd.layer_norm(&format!("{base}.ln3"), sum);
    }

    let probs = match (&mem_ctx, cfg.integrator) {
        (Some((m, active)), IntegratorKind::Gate) => {
            let cache = state.cache.as_ref().expect("session cache built");
            let [f1k, f1v, f2k, f2v] = cache.gate.as_ref().expect("gate cache");
            let rows = m.layout.rows();
            let proj = GateProjection {
                f1_wq: fwd.p("cmem.gate.f1.wq"),
                f1_k: fwd.g.constant(rows, d, f1k.clone()),
                f1_v: fwd.g.constant(rows, d, f1v.clone()),
                f2_wq: fwd.p("cmem.gate.f2.wq"),
                f2_k: fwd.g.constant(rows, d, f2k.clone()),
                f2_v: fwd.g.constant(rows, d, f2v.clone()),
                f2_bias: fwd.p("cmem.gate.f2_bias"),
            };
            let hhat = integrate_gate_projected(&mut fwd.g, x, &proj, active);
            fwd.output_probs(hhat)
        }
        (Some((m, active)), IntegratorKind::Copy) => {
            let cache = state.cache.as_ref().expect("session cache built");
            let [score_k, f2k, f2v] = cache.copy.as_ref().expect("copy cache");
            let rows = m.layout.rows();
            let p_gen = fwd.output_probs(x);
            let proj = CopyProjection {
                score_wq: fwd.p("cmem.copy.score.wq"),
                score_k: fwd.g.constant(rows, d, score_k.clone()),
                f2_wq: fwd.p("cmem.copy.f2.wq"),
                f2_k: fwd.g.constant(rows, d, f2k.clone()),
                f2_v: fwd.g.constant(rows, d, f2v.clone()),
                gate_w: fwd.p("cmem.copy.gate_w"),
                gate_b: fwd.p("cmem.copy.gate_b"),
            };
            integrate_copy_projected(
                &mut fwd.g,
                p_gen,
                x,
                &m.layout,
                active,
                &proj,
                cfg.tgt_vocab,
            )
        }
        _ => fwd.output_probs(x),
    };

    let dist = fwd.g.values(probs).to_vec();
    state.push_step(prev, new_k, new_v);
    Ok(dist)
}
