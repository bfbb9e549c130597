//! Encoder-decoder Transformer with optional constraint memories, plus
//! training, fine-tuning, and checkpoint persistence.

pub mod checkpoint;
mod forward;
pub mod train;

pub use train::{init_from_baseline, train, TrainOptions, TrainReport};

use crate::cmem::{ConstraintMemory, ConstraintSet};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// How constraint memories are folded into the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegratorKind {
    None,
    Gate,
    Copy,
    Attn,
}

/// How constraint memories are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintEncoderKind {
    None,
    Shallow,
    Deep,
}

impl IntegratorKind {
    pub fn code(self) -> u32 {
        match self {
            IntegratorKind::None => 0,
            IntegratorKind::Gate => 1,
            IntegratorKind::Copy => 2,
            IntegratorKind::Attn => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => IntegratorKind::None,
            1 => IntegratorKind::Gate,
            2 => IntegratorKind::Copy,
            3 => IntegratorKind::Attn,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            IntegratorKind::None => "none",
            IntegratorKind::Gate => "gate",
            IntegratorKind::Copy => "copy",
            IntegratorKind::Attn => "attn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => IntegratorKind::None,
            "gate" => IntegratorKind::Gate,
            "copy" => IntegratorKind::Copy,
            "attn" => IntegratorKind::Attn,
            _ => return None,
        })
    }
}

impl ConstraintEncoderKind {
    pub fn code(self) -> u32 {
        match self {
            ConstraintEncoderKind::None => 0,
            ConstraintEncoderKind::Shallow => 1,
            ConstraintEncoderKind::Deep => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => ConstraintEncoderKind::None,
            1 => ConstraintEncoderKind::Shallow,
            2 => ConstraintEncoderKind::Deep,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ConstraintEncoderKind::None => "none",
            ConstraintEncoderKind::Shallow => "shallow",
            ConstraintEncoderKind::Deep => "deep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => ConstraintEncoderKind::None,
            "shallow" => ConstraintEncoderKind::Shallow,
            "deep" => ConstraintEncoderKind::Deep,
            _ => return None,
        })
    }
}

/// Architecture hyperparameters for one model variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub feed_forward_dim: usize,
    pub dropout: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub integrator: IntegratorKind,
    pub constraint_encoder: ConstraintEncoderKind,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough to train on a CPU in minutes.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            model_dim: 64,
            heads: 4,
            feed_forward_dim: 128,
            dropout: 0.1,
            src_vocab,
            tgt_vocab,
            max_len: 64,
            integrator: IntegratorKind::None,
            constraint_encoder: ConstraintEncoderKind::None,
        }
    }

    pub fn with_variant(
        mut self,
        encoder: ConstraintEncoderKind,
        integrator: IntegratorKind,
    ) -> Self {
        self.constraint_encoder = encoder;
        self.integrator = integrator;
        self
    }

    pub fn uses_memory(&self) -> bool {
        self.constraint_encoder != ConstraintEncoderKind::None
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("layer counts must be >= 1".to_string()));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return Err(Error::Config(
                "vocabularies must hold the four specials plus content".to_string(),
            ));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".to_string()));
        }
        let has_enc = self.constraint_encoder != ConstraintEncoderKind::None;
        let has_int = self.integrator != IntegratorKind::None;
        if has_enc != has_int {
            return Err(Error::Config(
                "constraint encoder and integrator must be configured together".to_string(),
            ));
        }
        Ok(())
    }
}

/// Encoded source sentence: the top-layer hidden rows.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    /// |x| x d matrix.
    pub hidden: Tensor,
    pub token_ids: Vec<u32>,
    /// One flag per row; always false here (single sentences, no padding),
    /// kept so batched callers can mask.
    pub padding_mask: Vec<bool>,
}

/// Incremental decoding state: per-layer projected key/value histories plus
/// the token prefix fed so far (bos first). Each history holds exactly one
/// row per consumed timestep.
#[derive(Debug, Clone, Default)]
pub struct DecoderState {
    prefix: Vec<u32>,
    /// Per decoder layer: flat t*d projected self-attention keys.
    self_k: Vec<Vec<f64>>,
    /// Per decoder layer: flat t*d projected self-attention values.
    self_v: Vec<Vec<f64>>,
    pub(crate) cache: Option<forward::SessionCache>,
}

impl DecoderState {
    pub fn new(decoder_layers: usize) -> Self {
        DecoderState {
            prefix: Vec::new(),
            self_k: vec![Vec::new(); decoder_layers],
            self_v: vec![Vec::new(); decoder_layers],
            cache: None,
        }
    }

    /// Number of timesteps consumed.
    pub fn len(&self) -> usize {
        self.prefix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefix.is_empty()
    }

    pub fn prefix(&self) -> &[u32] {
        &self.prefix
    }

    /// History length (in rows) of one layer; equal to `len()` for every
    /// layer by construction.
    pub fn history_len(&self, layer: usize, model_dim: usize) -> usize {
        self.self_k[layer].len() / model_dim
    }

    pub(crate) fn histories_len(&self) -> usize {
        self.self_k.len()
    }

    pub(crate) fn self_keys(&self, layer: usize) -> &[f64] {
        &self.self_k[layer]
    }

    pub(crate) fn self_values(&self, layer: usize) -> &[f64] {
        &self.self_v[layer]
    }

    pub(crate) fn push_step(&mut self, token: u32, new_k: Vec<Vec<f64>>, new_v: Vec<Vec<f64>>) {
        debug_assert_eq!(new_k.len(), self.self_k.len());
        debug_assert_eq!(new_v.len(), self.self_v.len());
        for (h, row) in self.self_k.iter_mut().zip(new_k) {
            h.extend(row);
        }
        for (h, row) in self.self_v.iter_mut().zip(new_v) {
            h.extend(row);
        }
        self.prefix.push(token);
    }
}

/// A model variant: configuration plus every learnable parameter.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn xavier(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_values(&[rows, cols], values)
}

fn embedding_init(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    // Uniform with the variance of N(0, 1/d).
    let limit = (3.0 / cols as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_values(&[rows, cols], values)
}

/// Bias that starts a sigmoid gate near the pass-through path, so a freshly
/// initialized variant behaves close to its baseline.
pub const GATE_BIAS_INIT: f64 = 2.0;

enum Init<'r> {
    Random(&'r mut ChaCha20Rng),
    Zeros,
}

impl Init<'_> {
    fn matrix(&mut self, rows: usize, cols: usize) -> Tensor {
        match self {
            Init::Random(rng) => xavier(rng, rows, cols),
            Init::Zeros => Tensor::zeros(&[rows, cols]),
        }
    }

    fn embedding(&mut self, rows: usize, cols: usize) -> Tensor {
        match self {
            Init::Random(rng) => embedding_init(rng, rows, cols),
            Init::Zeros => Tensor::zeros(&[rows, cols]),
        }
    }

    fn fill(&mut self, len: usize, value: f64) -> Tensor {
        match self {
            Init::Random(_) => Tensor::from_values(&[len], vec![value; len]),
            Init::Zeros => Tensor::zeros(&[len]),
        }
    }
}

fn add_attention_params(params: &mut ParamSet, init: &mut Init, prefix: &str, d: usize) {
    for side in ["wq", "wk", "wv", "wo"] {
        params.insert(&format!("{prefix}.{side}"), init.matrix(d, d));
    }
    for side in ["bq", "bk", "bv", "bo"] {
        params.insert(&format!("{prefix}.{side}"), Tensor::zeros(&[d]));
    }
}

fn add_layer_norm_params(params: &mut ParamSet, init: &mut Init, prefix: &str, d: usize) {
    params.insert(&format!("{prefix}.gain"), init.fill(d, 1.0));
    params.insert(&format!("{prefix}.bias"), Tensor::zeros(&[d]));
}

fn add_feed_forward_params(params: &mut ParamSet, init: &mut Init, prefix: &str, d: usize, ff: usize) {
    params.insert(&format!("{prefix}.w1"), init.matrix(d, ff));
    params.insert(&format!("{prefix}.b1"), Tensor::zeros(&[ff]));
    params.insert(&format!("{prefix}.w2"), init.matrix(ff, d));
    params.insert(&format!("{prefix}.b2"), Tensor::zeros(&[d]));
}

fn add_encoder_layer(params: &mut ParamSet, init: &mut Init, prefix: &str, d: usize, ff: usize) {
    add_attention_params(params, init, &format!("{prefix}.self"), d);
    add_layer_norm_params(params, init, &format!("{prefix}.ln1"), d);
    add_feed_forward_params(params, init, &format!("{prefix}.ff"), d, ff);
    add_layer_norm_params(params, init, &format!("{prefix}.ln2"), d);
}

fn build_params(config: &ModelConfig, mut init: Init) -> ParamSet {
    let d = config.model_dim;
    let ff = config.feed_forward_dim;
    let mut params = ParamSet::new();
    params.insert("src_embed", init.embedding(config.src_vocab, d));
    params.insert("tgt_embed", init.embedding(config.tgt_vocab, d));
    for l in 0..config.encoder_layers {
        add_encoder_layer(&mut params, &mut init, &format!("enc.{l}"), d, ff);
    }
    for l in 0..config.decoder_layers {
        let prefix = format!("dec.{l}");
        add_attention_params(&mut params, &mut init, &format!("{prefix}.self"), d);
        add_layer_norm_params(&mut params, &mut init, &format!("{prefix}.ln1"), d);
        add_attention_params(&mut params, &mut init, &format!("{prefix}.cross"), d);
        add_layer_norm_params(&mut params, &mut init, &format!("{prefix}.ln2"), d);
        add_feed_forward_params(&mut params, &mut init, &format!("{prefix}.ff"), d, ff);
        add_layer_norm_params(&mut params, &mut init, &format!("{prefix}.ln3"), d);
    }
    params.insert("out.w", init.matrix(d, config.tgt_vocab));
    params.insert("out.b", Tensor::zeros(&[config.tgt_vocab]));

    if config.uses_memory() {
        params.insert("cmem.sentinel", init.embedding(1, d));
        if config.constraint_encoder == ConstraintEncoderKind::Deep {
            for l in 0..config.encoder_layers {
                add_encoder_layer(&mut params, &mut init, &format!("cmem.enc.{l}"), d, ff);
            }
        }
        match config.integrator {
            IntegratorKind::Gate => {
                for f in ["f1", "f2"] {
                    for side in ["wq", "wk", "wv"] {
                        params.insert(&format!("cmem.gate.{f}.{side}"), init.matrix(d, d));
                    }
                }
                params.insert("cmem.gate.f2_bias", init.fill(d, GATE_BIAS_INIT));
            }
            IntegratorKind::Copy => {
                params.insert("cmem.copy.score.wq", init.matrix(d, d));
                params.insert("cmem.copy.score.wk", init.matrix(d, d));
                for side in ["wq", "wk", "wv"] {
                    params.insert(&format!("cmem.copy.f2.{side}"), init.matrix(d, d));
                }
                params.insert("cmem.copy.gate_w", init.matrix(d, 1));
                params.insert("cmem.copy.gate_b", init.fill(1, GATE_BIAS_INIT));
            }
            IntegratorKind::Attn | IntegratorKind::None => {}
        }
    }
    params
}

impl Model {
    /// Fresh model with seeded initialization; identical seeds give
    /// bit-identical parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let params = build_params(&config, Init::Random(&mut rng));
        Ok(Model { config, params })
    }

    /// Parameter skeleton with the right names and shapes, all zeros.
    pub(crate) fn zeroed(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let params = build_params(&config, Init::Zeros);
        Ok(Model { config, params })
    }

    /// Encode a source sentence to its top-layer hidden rows.
    pub fn encode_source(&self, x: &[u32]) -> Result<EncodedSource> {
        forward::encode_source(self, x)
    }

    /// Encode a constraint set into a reusable memory (inference mode).
    pub fn encode_memory(&self, c: &ConstraintSet) -> Result<ConstraintMemory> {
        forward::encode_memory(self, c)
    }

    pub fn begin_decode(&self) -> DecoderState {
        DecoderState::new(self.config.decoder_layers)
    }

    /// One incremental decoding step: feed `prev` (bos first), get the
    /// next-token distribution over the full target vocabulary.
    ///
    /// With no memory, or with `IntegratorKind::None`, this is exactly the
    /// baseline Transformer step.
    pub fn decode_step(
        &self,
        state: &mut DecoderState,
        src: &EncodedSource,
        prev: u32,
        memory: Option<&ConstraintMemory>,
    ) -> Result<Vec<f64>> {
        forward::decode_step(self, state, src, prev, memory)
    }

    /// Teacher-forced negative log-likelihood of a reference (ending in
    /// eos), equal to -log P(r | x, c).
    pub fn sequence_nll(&self, x: &[u32], r: &[u32], c: &ConstraintSet) -> Result<f64> {
        let (g, loss) = forward::nll_graph(self, x, r, c, None)?;
        Ok(g.item(loss))
    }

    /// Full teacher-forced per-step distributions, row t giving
    /// P(y_t | y_<t, x, c). Used by tests and gradient checks.
    pub fn batch_distributions(&self, x: &[u32], r: &[u32], c: &ConstraintSet) -> Result<Vec<Vec<f64>>> {
        forward::batch_distributions(self, x, r, c)
    }

    /// Loss graph for training; exposed within the crate for the trainer
    /// and the gradient checks.
    pub(crate) fn nll_graph(
        &self,
        x: &[u32],
        r: &[u32],
        c: &ConstraintSet,
        dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<(crate::tensor::Graph, crate::tensor::NodeId)> {
        forward::nll_graph(self, x, r, c, dropout_rng)
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmem::Constraint;
    use crate::corpus::{BOS, EOS};
    use crate::tensor::finite_difference_check;

    pub(crate) fn tiny_config(
        encoder: ConstraintEncoderKind,
        integrator: IntegratorKind,
    ) -> ModelConfig {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            model_dim: 8,
            heads: 2,
            feed_forward_dim: 16,
            dropout: 0.0,
            src_vocab: 12,
            tgt_vocab: 12,
            max_len: 16,
            integrator,
            constraint_encoder: encoder,
        }
    }

    pub(crate) fn all_variants() -> Vec<(ConstraintEncoderKind, IntegratorKind)> {
        let mut v = vec![(ConstraintEncoderKind::None, IntegratorKind::None)];
        for enc in [ConstraintEncoderKind::Shallow, ConstraintEncoderKind::Deep] {
            for int in [IntegratorKind::Gate, IntegratorKind::Copy, IntegratorKind::Attn] {
                v.push((enc, int));
            }
        }
        v
    }

    fn sample_constraints() -> ConstraintSet {
        ConstraintSet::new(vec![
            Constraint {
                surface: "w1".into(),
                tokens: vec![5, 6],
            },
            Constraint {
                surface: "w2".into(),
                tokens: vec![9],
            },
        ])
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config(ConstraintEncoderKind::Deep, IntegratorKind::Copy);
        let a = Model::init(cfg.clone(), 42).unwrap();
        let b = Model::init(cfg, 42).unwrap();
        for i in 0..a.params.len() {
            assert_eq!(a.params.at(i).values, b.params.at(i).values);
        }
    }

    #[test]
    fn config_validation_rejects_bad_combos() {
        let mut cfg = tiny_config(ConstraintEncoderKind::None, IntegratorKind::Gate);
        assert!(cfg.validate().is_err());
        cfg = tiny_config(ConstraintEncoderKind::Shallow, IntegratorKind::None);
        assert!(cfg.validate().is_err());
        cfg = tiny_config(ConstraintEncoderKind::None, IntegratorKind::None);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg = tiny_config(ConstraintEncoderKind::None, IntegratorKind::None);
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_source_shape_and_errors() {
        let model = Model::init(
            tiny_config(ConstraintEncoderKind::None, IntegratorKind::None),
            3,
        )
        .unwrap();
        let enc = model.encode_source(&[4]).unwrap();
        assert_eq!(enc.hidden.shape, vec![1, 8]);
        assert!(enc.hidden.values.iter().all(|v| v.is_finite()));
        assert!(model.encode_source(&[]).is_err());
        assert!(model.encode_source(&[99]).is_err());
        assert!(model.encode_source(&vec![4; 99]).is_err());
    }

    #[test]
    fn encode_source_is_position_sensitive_and_deterministic() {
        let model = Model::init(
            tiny_config(ConstraintEncoderKind::None, IntegratorKind::None),
            3,
        )
        .unwrap();
        let a = model.encode_source(&[4, 5]).unwrap();
        let b = model.encode_source(&[5, 4]).unwrap();
        assert_ne!(a.hidden.values, b.hidden.values);
        let c = model.encode_source(&[4, 5]).unwrap();
        assert_eq!(a.hidden.values, c.hidden.values);
    }

    #[test]
    fn distributions_normalize_for_every_variant() {
        for (enc, int) in all_variants() {
            let model = Model::init(tiny_config(enc, int), 11).unwrap();
            let c = sample_constraints();
            let dists = model
                .batch_distributions(&[4, 5, 6], &[7, 5, 6, 9, EOS], &c)
                .unwrap();
            for row in &dists {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "{enc:?} {int:?} sum {sum}");
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn zero_output_projection_gives_uniform_distribution() {
        let mut model = Model::init(
            tiny_config(ConstraintEncoderKind::None, IntegratorKind::None),
            5,
        )
        .unwrap();
        let w = model.params.get_mut("out.w").unwrap();
        w.values.iter_mut().for_each(|v| *v = 0.0);
        let src = model.encode_source(&[4]).unwrap();
        let mut state = model.begin_decode();
        let dist = model.decode_step(&mut state, &src, BOS, None).unwrap();
        let expected = 1.0 / model.config.tgt_vocab as f64;
        for &p in &dist {
            assert!((p - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn incremental_matches_batch_for_every_variant() {
        let x = vec![4, 5, 6, 7];
        let r = vec![8, 5, 9, 6, EOS];
        let c = sample_constraints();
        for (enc, int) in all_variants() {
            let model = Model::init(tiny_config(enc, int), 23).unwrap();
            let batch = model.batch_distributions(&x, &r, &c).unwrap();

            let src = model.encode_source(&x).unwrap();
            let memory = if model.config.uses_memory() {
                Some(model.encode_memory(&c).unwrap())
            } else {
                None
            };
            let mut state = model.begin_decode();
            let mut prev = BOS;
            let mut total_nll = 0.0;
            for (t, &target) in r.iter().enumerate() {
                let dist = model
                    .decode_step(&mut state, &src, prev, memory.as_ref())
                    .unwrap();
                for (a, b) in batch[t].iter().zip(&dist) {
                    assert!(
                        (a - b).abs() < 1e-8,
                        "{enc:?} {int:?} t={t} {a} vs {b}"
                    );
                }
                total_nll -= dist[target as usize].ln();
                prev = target;
            }
            let nll = model.sequence_nll(&x, &r, &c).unwrap();
            assert!(
                (nll - total_nll).abs() < 1e-8,
                "{enc:?} {int:?}: {nll} vs {total_nll}"
            );
        }
    }

    #[test]
    fn baseline_ignores_constraints() {
        let model = Model::init(
            tiny_config(ConstraintEncoderKind::None, IntegratorKind::None),
            31,
        )
        .unwrap();
        let x = vec![4, 5];
        let r = vec![6, 7, EOS];
        let with = model
            .batch_distributions(&x, &r, &sample_constraints())
            .unwrap();
        let without = model
            .batch_distributions(&x, &r, &ConstraintSet::empty())
            .unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn empty_constraints_equal_sentinel_only_memory() {
        let x = vec![4, 5];
        let r = vec![6, 7, EOS];
        for (enc, int) in all_variants().into_iter().skip(1) {
            let model = Model::init(tiny_config(enc, int), 37).unwrap();
            let via_empty = model
                .batch_distributions(&x, &r, &ConstraintSet::empty())
                .unwrap();
            // Drive decode_step with an explicitly encoded sentinel-only memory.
            let src = model.encode_source(&x).unwrap();
            let memory = model.encode_memory(&ConstraintSet::empty()).unwrap();
            assert_eq!(memory.layout.rows(), 1);
            let mut state = model.begin_decode();
            let mut prev = BOS;
            for (t, &target) in r.iter().enumerate() {
                let dist = model
                    .decode_step(&mut state, &src, prev, Some(&memory))
                    .unwrap();
                for (a, b) in via_empty[t].iter().zip(&dist) {
                    assert!((a - b).abs() < 1e-6, "{enc:?} {int:?}");
                }
                prev = target;
            }
        }
    }

    #[test]
    fn saturated_gate_bias_reproduces_baseline() {
        // A variant initialized from a baseline, with the gate bias pushed to
        // saturation, must reproduce baseline distributions within 1e-6.
        let base_cfg = tiny_config(ConstraintEncoderKind::None, IntegratorKind::None);
        let baseline = Model::init(base_cfg, 41).unwrap();
        let x = vec![4, 5, 6];
        let r = vec![7, 8, EOS];
        let c = sample_constraints();
        let base_dists = baseline.batch_distributions(&x, &r, &c).unwrap();

        for enc in [ConstraintEncoderKind::Shallow, ConstraintEncoderKind::Deep] {
            for int in [IntegratorKind::Gate, IntegratorKind::Copy] {
                let cfg = tiny_config(enc, int);
                let mut variant = init_from_baseline(cfg, &baseline, 43).unwrap();
                let bias_name = match int {
                    IntegratorKind::Gate => "cmem.gate.f2_bias",
                    IntegratorKind::Copy => "cmem.copy.gate_b",
                    _ => unreachable!(),
                };
                let bias = variant.params.get_mut(bias_name).unwrap();
                bias.values.iter_mut().for_each(|v| *v = 40.0);
                let dists = variant.batch_distributions(&x, &r, &c).unwrap();
                for (row_a, row_b) in base_dists.iter().zip(&dists) {
                    for (a, b) in row_a.iter().zip(row_b) {
                        assert!((a - b).abs() < 1e-6, "{enc:?} {int:?}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn shared_embedding_feeds_both_memory_encoders() {
        for enc in [ConstraintEncoderKind::Shallow, ConstraintEncoderKind::Deep] {
            let mut model =
                Model::init(tiny_config(enc, IntegratorKind::Gate), 53).unwrap();
            let c = ConstraintSet::new(vec![Constraint {
                surface: "w".into(),
                tokens: vec![7],
            }]);
            let before = model.encode_memory(&c).unwrap();
            let d = model.config.model_dim;
            let table = model.params.get_mut("tgt_embed").unwrap();
            table.values[7 * d] += 1.0;
            let after = model.encode_memory(&c).unwrap();
            assert_ne!(before.rows.values, after.rows.values, "{enc:?}");
        }
    }

    #[test]
    fn copy_constrained_support_is_exact() {
        // P_c support: with the gate forced fully open toward the memory,
        // probability off the constraint tokens must equal the generator part
        // exactly scaled by g; the constrained part adds only on targets.
        let model = Model::init(
            tiny_config(ConstraintEncoderKind::Shallow, IntegratorKind::Copy),
            61,
        )
        .unwrap();
        let c = sample_constraints();
        let constraint_tokens: std::collections::HashSet<u32> =
            c.iter().flat_map(|cc| cc.tokens.iter().copied()).collect();
        let x = vec![4, 5];
        let src = model.encode_source(&x).unwrap();
        let memory = model.encode_memory(&c).unwrap();
        let mut state = model.begin_decode();
        let mixed = model
            .decode_step(&mut state, &src, BOS, Some(&memory))
            .unwrap();

        // Same step on a variant whose copy gate is saturated toward
        // generation: recovers P_gen, so P_c = (mixed - g*P_gen)/(1-g).
        let mut pure = model.clone();
        pure.params
            .get_mut("cmem.copy.gate_b")
            .unwrap()
            .values[0] = 1000.0;
        let mut state2 = pure.begin_decode();
        let p_gen = pure
            .decode_step(&mut state2, &src, BOS, Some(&memory))
            .unwrap();
        // Infer g from a vocabulary entry outside the support.
        let probe = (0..model.config.tgt_vocab as u32)
            .find(|t| !constraint_tokens.contains(t))
            .unwrap() as usize;
        let gate = mixed[probe] / p_gen[probe];
        for v in 0..model.config.tgt_vocab {
            let residual = mixed[v] - gate * p_gen[v];
            if constraint_tokens.contains(&(v as u32)) {
                continue;
            }
            assert!(
                residual.abs() < 1e-9,
                "token {v} picked up constrained mass {residual}"
            );
        }
    }

    #[test]
    fn gradients_pass_finite_differences_se_attn() {
        let cfg = ModelConfig {
            encoder_layers: 1,
            decoder_layers: 1,
            model_dim: 8,
            heads: 2,
            feed_forward_dim: 12,
            dropout: 0.0,
            src_vocab: 10,
            tgt_vocab: 10,
            max_len: 8,
            integrator: IntegratorKind::Attn,
            constraint_encoder: ConstraintEncoderKind::Shallow,
        };
        let mut model = Model::init(cfg, 71).unwrap();
        let x = vec![4, 5];
        let r = vec![6, 7, EOS];
        let c = ConstraintSet::new(vec![Constraint {
            surface: "w".into(),
            tokens: vec![7, 8],
        }]);
        let config = model.config.clone();
        let worst = finite_difference_check(
            &mut model.params,
            1e-4,
            |p| {
                let m = Model {
                    config: config.clone(),
                    params: p.clone(),
                };
                m.sequence_nll(&x, &r, &c)
            },
            |p| {
                let m = Model {
                    config: config.clone(),
                    params: p.clone(),
                };
                let (mut graph, loss) = m.nll_graph(&x, &r, &c, None)?;
                graph.backward(loss, 1.0);
                let value = graph.item(loss);
                graph.accumulate_param_grads(p, 1.0);
                Ok(value)
            },
        )
        .unwrap();
        assert!(worst < 1e-4, "worst {worst}");
    }

    #[test]
    fn decode_step_length_overflow() {
        let model = Model::init(
            tiny_config(ConstraintEncoderKind::None, IntegratorKind::None),
            81,
        )
        .unwrap();
        let src = model.encode_source(&[4]).unwrap();
        let mut state = model.begin_decode();
        let mut prev = BOS;
        for _ in 0..model.config.max_len {
            model.decode_step(&mut state, &src, prev, None).unwrap();
            prev = 4;
        }
        assert!(matches!(
            model.decode_step(&mut state, &src, prev, None),
            Err(Error::LengthOverflow { .. })
        ));
    }

    #[test]
    fn train_zero_epochs_keeps_initialization() {
        let cfg = tiny_config(ConstraintEncoderKind::None, IntegratorKind::None);
        let mut model = Model::init(cfg.clone(), 91).unwrap();
        let reference = Model::init(cfg, 91).unwrap();
        let data = vec![crate::corpus::DatasetTuple {
            source_ids: vec![4, 5],
            reference_ids: vec![6, EOS],
            constraints: ConstraintSet::empty(),
        }];
        let opts = TrainOptions {
            epochs: 0,
            quiet: true,
            ..TrainOptions::default()
        };
        train(&mut model, &data, &opts).unwrap();
        for i in 0..model.params.len() {
            assert_eq!(model.params.at(i).values, reference.params.at(i).values);
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let cfg = ModelConfig {
            dropout: 0.1,
            ..tiny_config(ConstraintEncoderKind::Shallow, IntegratorKind::Gate)
        };
        let data = vec![
            crate::corpus::DatasetTuple {
                source_ids: vec![4, 5, 6],
                reference_ids: vec![6, 5, EOS],
                constraints: sample_constraints(),
            },
            crate::corpus::DatasetTuple {
                source_ids: vec![7, 8],
                reference_ids: vec![9, EOS],
                constraints: ConstraintSet::empty(),
            },
        ];
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 2,
            quiet: true,
            ..TrainOptions::default()
        };
        let mut a = Model::init(cfg.clone(), 7).unwrap();
        let ra = train(&mut a, &data, &opts).unwrap();
        let mut b = Model::init(cfg, 7).unwrap();
        let rb = train(&mut b, &data, &opts).unwrap();
        assert_eq!(ra.epoch_mean_nll, rb.epoch_mean_nll);
        for i in 0..a.params.len() {
            let (va, vb) = (&a.params.at(i).values, &b.params.at(i).values);
            for (x, y) in va.iter().zip(vb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn uniform_model_nll_is_length_times_log_vocab() {
        let mut cfg = tiny_config(ConstraintEncoderKind::None, IntegratorKind::None);
        cfg.tgt_vocab = 8;
        let mut model = Model::init(cfg, 101).unwrap();
        model
            .params
            .get_mut("out.w")
            .unwrap()
            .values
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let r = vec![5, 6, EOS];
        let nll = model
            .sequence_nll(&[4], &r, &ConstraintSet::empty())
            .unwrap();
        assert!((nll - 3.0 * 8.0_f64.ln()).abs() < 1e-9);
    }
}
