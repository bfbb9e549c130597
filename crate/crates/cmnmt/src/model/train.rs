//! The training loop: Adam over teacher-forced NLL, with optional
//! fine-tuning from a baseline checkpoint.

use super::{Model, ModelConfig};
use crate::corpus::DatasetTuple;
use crate::error::{Error, Result};
use crate::tensor::{adam_step, AdamState};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Print one line per epoch to stderr.
    pub quiet: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 1,
            quiet: false,
        }
    }
}

/// Per-epoch mean negative log-likelihood per target token, in nats.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epoch_mean_nll: Vec<f64>,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix-style stream separation for per-sentence rngs
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Variant model initialized from a trained baseline: every parameter whose
/// name exists in the baseline is copied over, new constraint parameters
/// keep their fresh seeded initialization.
pub fn init_from_baseline(config: ModelConfig, baseline: &Model, seed: u64) -> Result<Model> {
    let mut model = Model::init(config, seed)?;
    for i in 0..model.params.len() {
        let name = model.params.name_at(i).to_string();
        if let Some(src) = baseline.params.get(&name) {
            let dst = model.params.at_mut(i);
            if dst.shape != src.shape {
                return Err(Error::ShapeMismatch {
                    context: "baseline parameter",
                    expected: format!("{name} {:?}", dst.shape),
                    got: format!("{:?}", src.shape),
                });
            }
            dst.values.clone_from(&src.values);
        }
    }
    Ok(model)
}

/// Adam-train a model in place over (x, r, c) tuples. Gradients are averaged
/// per target token within each minibatch. Fully deterministic for a fixed
/// seed: shuffling and dropout draw from per-(epoch, sentence) streams.
pub fn train(model: &mut Model, data: &[DatasetTuple], opts: &TrainOptions) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    let mut report = TrainReport::default();
    let mut adam = AdamState::new(&model.params, opts.learning_rate);
    let batch_size = opts.batch_size.max(1);

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = ChaCha20Rng::seed_from_u64(mix(opts.seed, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(batch_size) {
            let total_tokens: usize = batch.iter().map(|&i| data[i].reference_ids.len()).sum();
            if total_tokens == 0 {
                continue;
            }
            model.params.zero_grads();
            for &i in batch {
                let tuple = &data[i];
                let mut dropout_rng = ChaCha20Rng::seed_from_u64(mix(
                    mix(opts.seed, 0x5eed + epoch as u64),
                    i as u64,
                ));
                let (mut graph, loss) = model.nll_graph(
                    &tuple.source_ids,
                    &tuple.reference_ids,
                    &tuple.constraints,
                    Some(&mut dropout_rng),
                )?;
                graph.backward(loss, 1.0);
                graph.accumulate_param_grads(&mut model.params, 1.0 / total_tokens as f64);
                epoch_nll += graph.item(loss);
                epoch_tokens += tuple.reference_ids.len();
            }
            adam_step(&mut model.params, &mut adam)?;
        }
        let mean = epoch_nll / epoch_tokens.max(1) as f64;
        if !opts.quiet {
            eprintln!("epoch {:>3}  nll/token {:.6}", epoch + 1, mean);
        }
        report.epoch_mean_nll.push(mean);
    }
    model.params.clear_grads();
    Ok(report)
}
