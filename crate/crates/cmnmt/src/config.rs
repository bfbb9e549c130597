//! Run configuration: a flat key=value file with flag overrides. Unknown
//! keys are rejected so every experiment record stays diffable and honest.

use crate::error::{Error, Result};
use crate::model::{ConstraintEncoderKind, IntegratorKind, ModelConfig};

/// Which constraint-generation scenario drives a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Perfect,
    Noisy,
    Auto,
}

impl Scenario {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "perfect" | "1" => Scenario::Perfect,
            "noisy" | "2" => Scenario::Noisy,
            "auto" | "3" => Scenario::Auto,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Perfect => "perfect",
            Scenario::Noisy => "noisy",
            Scenario::Auto => "auto",
        }
    }
}

/// Decoder selection for translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    Beam,
    Gbs,
    Dba,
}

impl DecoderMode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "beam" => DecoderMode::Beam,
            "gbs" => DecoderMode::Gbs,
            "dba" => DecoderMode::Dba,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DecoderMode::Beam => "beam",
            DecoderMode::Gbs => "gbs",
            DecoderMode::Dba => "dba",
        }
    }
}

/// Every knob of one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model architecture
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub encoder: ConstraintEncoderKind,
    pub integrator: IntegratorKind,
    // corpus pipeline
    pub merges: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    // alignment table
    pub em_iterations: usize,
    pub prune_threshold: f64,
    // constraints
    pub scenario: Scenario,
    pub k: usize,
    pub replace_p: f64,
    pub noise_count: Option<usize>,
    // training
    pub epochs: usize,
    pub ft_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    // decoding
    pub beam: usize,
    pub decoder: DecoderMode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            enc_layers: 2,
            dec_layers: 2,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            dropout: 0.1,
            max_len: 64,
            encoder: ConstraintEncoderKind::None,
            integrator: IntegratorKind::None,
            merges: 200,
            src_vocab_size: 4000,
            tgt_vocab_size: 4000,
            em_iterations: 5,
            prune_threshold: 0.05,
            scenario: Scenario::Perfect,
            k: 5,
            replace_p: 0.6,
            noise_count: None,
            epochs: 30,
            ft_epochs: 15,
            batch_size: 16,
            learning_rate: 1e-3,
            beam: 8,
            decoder: DecoderMode::Beam,
            seed: 1,
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value `{value}` for key `{key}`"))
}

impl RunConfig {
    /// Apply one key=value setting; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "enc_layers" => self.enc_layers = num!(),
            "dec_layers" => self.dec_layers = num!(),
            "model_dim" => self.model_dim = num!(),
            "heads" => self.heads = num!(),
            "ff_dim" => self.ff_dim = num!(),
            "dropout" => self.dropout = num!(),
            "max_len" => self.max_len = num!(),
            "encoder" => {
                self.encoder = ConstraintEncoderKind::parse(value).ok_or_else(|| bad(key, value))?
            }
            "integrator" => {
                self.integrator = IntegratorKind::parse(value).ok_or_else(|| bad(key, value))?
            }
            "merges" => self.merges = num!(),
            "src_vocab_size" => self.src_vocab_size = num!(),
            "tgt_vocab_size" => self.tgt_vocab_size = num!(),
            "em_iterations" => self.em_iterations = num!(),
            "prune_threshold" => self.prune_threshold = num!(),
            "scenario" => self.scenario = Scenario::parse(value).ok_or_else(|| bad(key, value))?,
            "k" => self.k = num!(),
            "replace_p" => self.replace_p = num!(),
            "noise_count" => {
                self.noise_count = if value == "none" {
                    None
                } else {
                    Some(num!())
                }
            }
            "epochs" => self.epochs = num!(),
            "ft_epochs" => self.ft_epochs = num!(),
            "batch_size" => self.batch_size = num!(),
            "learning_rate" => self.learning_rate = num!(),
            "beam" => self.beam = num!(),
            "decoder" => self.decoder = DecoderMode::parse(value).ok_or_else(|| bad(key, value))?,
            "seed" => self.seed = num!(),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parse a config file body: one key=value per line, `#` comments and
    /// blank lines allowed.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {}: expected key=value, got `{raw}`",
                    i + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The fully resolved configuration, one key per line, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
        kv("batch_size", self.batch_size.to_string());
        kv("beam", self.beam.to_string());
        kv("dec_layers", self.dec_layers.to_string());
        kv("decoder", self.decoder.name().to_string());
        kv("dropout", self.dropout.to_string());
        kv("em_iterations", self.em_iterations.to_string());
        kv("enc_layers", self.enc_layers.to_string());
        kv("encoder", self.encoder.name().to_string());
        kv("epochs", self.epochs.to_string());
        kv("ff_dim", self.ff_dim.to_string());
        kv("ft_epochs", self.ft_epochs.to_string());
        kv("heads", self.heads.to_string());
        kv("integrator", self.integrator.name().to_string());
        kv("k", self.k.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("max_len", self.max_len.to_string());
        kv("merges", self.merges.to_string());
        kv(
            "noise_count",
            self.noise_count
                .map_or("none".to_string(), |n| n.to_string()),
        );
        kv("model_dim", self.model_dim.to_string());
        kv("prune_threshold", self.prune_threshold.to_string());
        kv("replace_p", self.replace_p.to_string());
        kv("scenario", self.scenario.name().to_string());
        kv("seed", self.seed.to_string());
        kv("src_vocab_size", self.src_vocab_size.to_string());
        kv("tgt_vocab_size", self.tgt_vocab_size.to_string());
        out
    }

    /// Concrete model configuration given actual vocabulary sizes.
    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            encoder_layers: self.enc_layers,
            decoder_layers: self.dec_layers,
            model_dim: self.model_dim,
            heads: self.heads,
            feed_forward_dim: self.ff_dim,
            dropout: self.dropout,
            src_vocab,
            tgt_vocab,
            max_len: self.max_len,
            integrator: self.integrator,
            constraint_encoder: self.encoder,
        }
    }

    /// Baseline counterpart (no memory) of [`RunConfig::model_config`].
    pub fn baseline_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            integrator: IntegratorKind::None,
            constraint_encoder: ConstraintEncoderKind::None,
            ..self.model_config(src_vocab, tgt_vocab)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_apply_and_round_trip() {
        let text = "# comment\nscenario=noisy\nnoise_count=3\nmodel_dim=32\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.scenario, Scenario::Noisy);
        assert_eq!(cfg.noise_count, Some(3));
        assert_eq!(cfg.model_dim, 32);
        let resolved = cfg.to_text();
        let reparsed = RunConfig::parse(&resolved).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::parse("nonsense=1\n").is_err());
        assert!(RunConfig::parse("model_dim=hello\n").is_err());
        assert!(RunConfig::parse("scenario=5\n").is_err());
        assert!(RunConfig::parse("just a line\n").is_err());
    }

    #[test]
    fn scenario_and_decoder_aliases() {
        assert_eq!(Scenario::parse("2"), Some(Scenario::Noisy));
        assert_eq!(Scenario::parse("perfect"), Some(Scenario::Perfect));
        assert_eq!(DecoderMode::parse("gbs"), Some(DecoderMode::Gbs));
        assert_eq!(DecoderMode::parse("nope"), None);
    }
}
