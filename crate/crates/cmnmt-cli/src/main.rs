//! Command-line front end: subcommands over the translation engine, wired
//! so the whole experiment loop (preprocess, align, generate constraints,
//! train, fine-tune, translate, evaluate) runs from one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use cmnmt::config::{DecoderMode, RunConfig, Scenario};
use cmnmt::constraints::{
    build_alignment_table, constraints_to_lines, noise_positions_to_lines,
    parse_constraint_lines, AlignmentTable, FrequencyTable,
};
use cmnmt::corpus::{
    assemble_dataset, build_vocab, learn_bpe, read_lines, write_lines, BpeModel, Vocabulary,
};
use cmnmt::error::Error;
use cmnmt::eval::bleu4;
use cmnmt::model::{checkpoint, init_from_baseline, train, Model, TrainOptions};
use cmnmt::pipeline::{
    generate_constraints, read_corpus, run_pipeline, subword_lines, translate_corpus, words_of,
    PipelinePaths, TokenizerBundle,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cmnmt",
    version,
    about = "Neural machine translation with lexical constraints as external memories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shared config-file/override plumbing: flags win over the file.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual key=value overrides (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply(&text)?;
        }
        for setting in &self.sets {
            let Some((k, v)) = setting.split_once('=') else {
                return Err(Error::Config(format!(
                    "--set expects KEY=VALUE, got `{setting}`"
                )));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full experiment loop into an output directory.
    Pipeline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        train_src: PathBuf,
        #[arg(long)]
        train_ref: PathBuf,
        #[arg(long)]
        test_src: PathBuf,
        #[arg(long)]
        test_ref: PathBuf,
        /// User-provided test constraints (scenarios 1-2); generated when absent.
        #[arg(long)]
        test_constraints: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Learn a BPE model (and optionally a vocabulary) from a corpus.
    Bpe {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        merges: Option<usize>,
        #[arg(long)]
        output: PathBuf,
        /// Also build a frequency-ranked vocabulary over the subword corpus.
        #[arg(long)]
        vocab_output: Option<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Build the word-to-word alignment table from a parallel corpus.
    BuildTable {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate constraints for scenario 1 (perfect), 2 (noisy) or 3 (auto).
    GenConstraints {
        #[command(flatten)]
        config: ConfigArgs,
        /// Scenario: perfect|noisy|auto or 1|2|3.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Corpus whose word frequencies define rarity (target side for
        /// scenarios 1-2, source side for scenario 3).
        #[arg(long)]
        freq_corpus: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        noise_count: Option<usize>,
        #[arg(long)]
        output: PathBuf,
        /// Sidecar with comma-separated noise positions per line.
        #[arg(long)]
        meta: Option<PathBuf>,
    },
    /// Train a model from scratch (baseline when encoder/integrator = none).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        constraints: Option<PathBuf>,
        #[arg(long)]
        src_bpe: PathBuf,
        #[arg(long)]
        tgt_bpe: PathBuf,
        #[arg(long)]
        src_vocab: PathBuf,
        #[arg(long)]
        tgt_vocab: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fine-tune a constraint-memory variant from a baseline checkpoint.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        constraints: Option<PathBuf>,
        #[arg(long)]
        src_bpe: PathBuf,
        #[arg(long)]
        tgt_bpe: PathBuf,
        #[arg(long)]
        src_vocab: PathBuf,
        #[arg(long)]
        tgt_vocab: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Translate a source file with a trained checkpoint.
    Translate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        constraints: Option<PathBuf>,
        #[arg(long)]
        src_bpe: PathBuf,
        #[arg(long)]
        tgt_bpe: PathBuf,
        #[arg(long)]
        src_vocab: PathBuf,
        #[arg(long)]
        tgt_vocab: PathBuf,
        /// beam | gbs | dba (overrides the config key).
        #[arg(long)]
        decoder: Option<String>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        output: PathBuf,
        /// Sidecar metadata (log-prob, flags, coverage, micros) per line.
        #[arg(long)]
        meta: Option<PathBuf>,
    },
    /// Score hypotheses against references with case-sensitive BLEU-4.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Also write the report to a file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_bundle(
    src_bpe: &Path,
    tgt_bpe: &Path,
    src_vocab: &Path,
    tgt_vocab: &Path,
) -> Result<TokenizerBundle, Error> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    Ok(TokenizerBundle {
        src_bpe: BpeModel::parse(&read(src_bpe)?)?,
        tgt_bpe: BpeModel::parse(&read(tgt_bpe)?)?,
        src_vocab: Vocabulary::parse(&read(src_vocab)?)?,
        tgt_vocab: Vocabulary::parse(&read(tgt_vocab)?)?,
    })
}

fn read_constraint_file(path: Option<&PathBuf>, lines: usize) -> Result<Vec<Vec<String>>, Error> {
    match path {
        Some(p) => {
            let raw = read_lines(p)?;
            let parsed = parse_constraint_lines(&raw)?;
            if parsed.len() != lines {
                return Err(Error::LineCountMismatch {
                    left_name: p.display().to_string(),
                    left: parsed.len(),
                    right_name: "source".to_string(),
                    right: lines,
                });
            }
            Ok(parsed)
        }
        None => Ok(vec![Vec::new(); lines]),
    }
}

#[allow(clippy::too_many_arguments)]
fn train_command(
    config: &ConfigArgs,
    baseline: Option<&PathBuf>,
    src: &Path,
    reference: &Path,
    constraints: Option<&PathBuf>,
    src_bpe: &Path,
    tgt_bpe: &Path,
    src_vocab: &Path,
    tgt_vocab: &Path,
    output: &Path,
) -> Result<(), Error> {
    let cfg = config.resolve()?;
    let src_lines = read_corpus(src)?;
    let ref_lines = read_corpus(reference)?;
    let bundle = load_bundle(src_bpe, tgt_bpe, src_vocab, tgt_vocab)?;
    let cons = read_constraint_file(constraints, src_lines.len())?;
    let tuples = assemble_dataset(
        &src_lines,
        &ref_lines,
        Some(&cons),
        &bundle.src_bpe,
        &bundle.tgt_bpe,
        &bundle.src_vocab,
        &bundle.tgt_vocab,
    )?;
    let (mut model, epochs) = match baseline {
        Some(base_path) => {
            let base = checkpoint::load(base_path)?;
            let variant_cfg = cfg.model_config(bundle.src_vocab.size(), bundle.tgt_vocab.size());
            (
                init_from_baseline(variant_cfg, &base, cfg.seed)?,
                cfg.ft_epochs,
            )
        }
        None => {
            let model_cfg = cfg.model_config(bundle.src_vocab.size(), bundle.tgt_vocab.size());
            (Model::init(model_cfg, cfg.seed)?, cfg.epochs)
        }
    };
    let opts = TrainOptions {
        epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        quiet: false,
    };
    let report = train(&mut model, &tuples, &opts)?;
    checkpoint::save(&model, output)?;
    if let Some(last) = report.epoch_mean_nll.last() {
        println!("final_nll_per_token={last:.6}");
    }
    println!("checkpoint={}", output.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pipeline {
            config,
            train_src,
            train_ref,
            test_src,
            test_ref,
            test_constraints,
            out_dir,
        } => {
            let cfg = config.resolve()?;
            let paths = PipelinePaths {
                train_src,
                train_ref,
                test_src,
                test_ref,
                test_constraints,
                out_dir,
            };
            let outcome = run_pipeline(&paths, &cfg)?;
            println!("bleu={:.2}", outcome.bleu.bleu);
            println!("noisy_rate={:.6}", outcome.test_noisy_rate);
            println!("sec_per_sentence={:.6}", outcome.sec_per_sentence);
            Ok(())
        }
        Command::Bpe {
            config,
            input,
            merges,
            output,
            vocab_output,
            vocab_size,
        } => {
            let cfg = config.resolve()?;
            let lines = read_corpus(&input)?;
            let model = learn_bpe(&lines, merges.unwrap_or(cfg.merges))?;
            std::fs::write(&output, model.to_text()).map_err(|e| Error::io(&output, e))?;
            if let Some(vocab_path) = vocab_output {
                let sub = subword_lines(&model, &lines);
                let vocab = build_vocab(&sub, vocab_size.unwrap_or(cfg.tgt_vocab_size))?;
                std::fs::write(&vocab_path, vocab.to_text())
                    .map_err(|e| Error::io(&vocab_path, e))?;
            }
            println!("merges={}", model.merge_count());
            Ok(())
        }
        Command::BuildTable {
            config,
            src,
            reference,
            output,
        } => {
            let cfg = config.resolve()?;
            let src_lines = read_corpus(&src)?;
            let ref_lines = read_corpus(&reference)?;
            if src_lines.len() != ref_lines.len() {
                return Err(Error::LineCountMismatch {
                    left_name: src.display().to_string(),
                    left: src_lines.len(),
                    right_name: reference.display().to_string(),
                    right: ref_lines.len(),
                });
            }
            let pairs: Vec<(Vec<String>, Vec<String>)> = src_lines
                .iter()
                .zip(&ref_lines)
                .map(|(s, r)| (words_of(s), words_of(r)))
                .collect();
            let table = build_alignment_table(&pairs, cfg.em_iterations, cfg.prune_threshold)?;
            std::fs::write(&output, table.to_text()).map_err(|e| Error::io(&output, e))?;
            println!("sources={}", table.sources().count());
            Ok(())
        }
        Command::GenConstraints {
            config,
            scenario,
            src,
            reference,
            freq_corpus,
            table,
            noise_count,
            output,
            meta,
        } => {
            let mut cfg = config.resolve()?;
            cfg.scenario = Scenario::parse(&scenario)
                .ok_or_else(|| Error::Config(format!("unknown scenario `{scenario}`")))?;
            if let Some(n) = noise_count {
                cfg.noise_count = Some(n);
            }
            let freq = FrequencyTable::from_lines(&read_corpus(&freq_corpus)?);
            let table = match table {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    Some(AlignmentTable::parse(&text)?)
                }
                None => None,
            };
            let ref_lines = match &reference {
                Some(p) => Some(read_corpus(p)?),
                None => None,
            };
            let src_lines = match &src {
                Some(p) => read_corpus(p)?,
                None => match &ref_lines {
                    // scenarios 1-2 only need references; mirror their length
                    Some(r) => vec![String::new(); r.len()],
                    None => {
                        return Err(Error::Config(
                            "gen-constraints needs --src (scenario 3) or --ref".to_string(),
                        ))
                    }
                },
            };
            let (cons, positions) = generate_constraints(
                cfg.scenario,
                cfg.k,
                cfg.replace_p,
                cfg.noise_count,
                &src_lines,
                ref_lines.as_deref(),
                &freq,
                table.as_ref(),
                cfg.seed,
            )?;
            write_lines(&output, &constraints_to_lines(&cons))?;
            if let Some(meta_path) = meta {
                write_lines(&meta_path, &noise_positions_to_lines(&positions))?;
            }
            println!("lines={}", cons.len());
            Ok(())
        }
        Command::Train {
            config,
            src,
            reference,
            constraints,
            src_bpe,
            tgt_bpe,
            src_vocab,
            tgt_vocab,
            output,
        } => train_command(
            &config,
            None,
            &src,
            &reference,
            constraints.as_ref(),
            &src_bpe,
            &tgt_bpe,
            &src_vocab,
            &tgt_vocab,
            &output,
        ),
        Command::Finetune {
            config,
            baseline,
            src,
            reference,
            constraints,
            src_bpe,
            tgt_bpe,
            src_vocab,
            tgt_vocab,
            output,
        } => train_command(
            &config,
            Some(&baseline),
            &src,
            &reference,
            constraints.as_ref(),
            &src_bpe,
            &tgt_bpe,
            &src_vocab,
            &tgt_vocab,
            &output,
        ),
        Command::Translate {
            config,
            checkpoint: ckpt_path,
            src,
            constraints,
            src_bpe,
            tgt_bpe,
            src_vocab,
            tgt_vocab,
            decoder,
            beam,
            output,
            meta,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(name) = decoder {
                cfg.decoder = DecoderMode::parse(&name)
                    .ok_or_else(|| Error::Config(format!("unknown decoder `{name}`")))?;
            }
            if let Some(b) = beam {
                cfg.beam = b;
            }
            let model = checkpoint::load(&ckpt_path)?;
            let bundle = load_bundle(&src_bpe, &tgt_bpe, &src_vocab, &tgt_vocab)?;
            if bundle.src_vocab.size() != model.config.src_vocab
                || bundle.tgt_vocab.size() != model.config.tgt_vocab
            {
                return Err(Error::Config(format!(
                    "vocabulary sizes {}/{} do not match checkpoint {}/{}",
                    bundle.src_vocab.size(),
                    bundle.tgt_vocab.size(),
                    model.config.src_vocab,
                    model.config.tgt_vocab
                )));
            }
            let src_lines = read_corpus(&src)?;
            let cons = read_constraint_file(constraints.as_ref(), src_lines.len())?;
            let (hyp, metas) =
                translate_corpus(&model, &bundle, &src_lines, &cons, cfg.decoder, cfg.beam)?;
            write_lines(&output, &hyp)?;
            if let Some(meta_path) = meta {
                let lines: Vec<String> = metas.iter().map(|m| m.to_line()).collect();
                write_lines(&meta_path, &lines)?;
            }
            println!("sentences={}", hyp.len());
            Ok(())
        }
        Command::Evaluate {
            config,
            hyp,
            reference,
            output,
        } => {
            let _ = config.resolve()?; // honor --seed/--config even when unused
            let hyp_lines = read_lines(&hyp)?;
            let ref_lines = read_lines(&reference)?;
            let hyp_words: Vec<Vec<String>> = hyp_lines.iter().map(|l| words_of(l)).collect();
            let ref_words: Vec<Vec<String>> = ref_lines.iter().map(|l| words_of(l)).collect();
            let report = bleu4(&hyp_words, &ref_words)?;
            print!("{}", report.to_kv());
            if let Some(path) = output {
                let text = format!("{}\n{}", report.to_text(), report.to_kv());
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_usage_error() {
                1
            } else if e.is_data_error() {
                2
            } else {
                3
            };
            std::process::exit(code);
        }
    }
}
