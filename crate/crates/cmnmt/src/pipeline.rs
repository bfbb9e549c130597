//! End-to-end experiment orchestration: preprocess, build the alignment
//! table, generate constraints for the configured scenario, train the
//! baseline, fine-tune the memory variant, translate the test set, and
//! report BLEU plus runtime — with a manifest tying every artifact to the
//! resolved configuration and seed.

use crate::cmem::ConstraintSet;
use crate::config::{DecoderMode, RunConfig, Scenario};
use crate::constraints::{
    auto_constraints, build_alignment_table, constraints_to_lines, extract_perfect_constraints,
    fixed_noise_count_sized, inject_noise, noise_positions_to_lines, noisy_rate,
    parse_constraint_lines, AlignmentTable, FrequencyTable,
};
use crate::corpus::{
    apply_bpe, assemble_dataset, build_vocab, encode_constraints, learn_bpe, read_lines,
    undo_bpe, write_lines, BpeModel, Vocabulary, EOS, PAD, UNK,
};
use crate::decode::{beam_search, dba_search, grid_beam_search, DecodeResult};
use crate::error::{Error, Result};
use crate::eval::{bleu4, measure_runtime, BleuReport};
use crate::model::{checkpoint, init_from_baseline, train, Model, TrainOptions};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

/// Read a corpus file and reject empty lines (they would produce empty
/// source sentences downstream).
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(Error::parse("corpus", format!("{}: empty file", path.display())));
    }
    for (i, line) in lines.iter().enumerate() {
        if line.split_whitespace().next().is_none() {
            return Err(Error::parse(
                "corpus",
                format!("{}: line {} is empty", path.display(), i + 1),
            ));
        }
    }
    Ok(lines)
}

pub fn words_of(line: &str) -> Vec<String> {
    line.split_whitespace().map(|w| w.to_string()).collect()
}

/// Subword tokenizers and vocabularies for both language sides.
pub struct TokenizerBundle {
    pub src_bpe: BpeModel,
    pub tgt_bpe: BpeModel,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl TokenizerBundle {
    pub fn learn(
        train_src: &[String],
        train_ref: &[String],
        merges: usize,
        src_vocab_size: usize,
        tgt_vocab_size: usize,
    ) -> Result<Self> {
        let src_bpe = learn_bpe(train_src, merges)?;
        let tgt_bpe = learn_bpe(train_ref, merges)?;
        let src_sub = subword_lines(&src_bpe, train_src);
        let tgt_sub = subword_lines(&tgt_bpe, train_ref);
        Ok(TokenizerBundle {
            src_vocab: build_vocab(&src_sub, src_vocab_size)?,
            tgt_vocab: build_vocab(&tgt_sub, tgt_vocab_size)?,
            src_bpe,
            tgt_bpe,
        })
    }
}

pub fn subword_lines(bpe: &BpeModel, lines: &[String]) -> Vec<String> {
    lines
        .iter()
        .map(|l| {
            let words: Vec<&str> = l.split_whitespace().collect();
            apply_bpe(bpe, &words).join(" ")
        })
        .collect()
}

/// Turn decoded target ids back into words: specials are dropped (unk
/// surfaces as its own `<unk>` word) and BPE is undone.
pub fn ids_to_words(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    let mut subwords: Vec<String> = Vec::with_capacity(ids.len());
    for &id in ids {
        if id == PAD || id == crate::corpus::BOS || id == EOS {
            continue;
        }
        if id == UNK {
            subwords.push(format!("<unk>{}", crate::corpus::WORD_END));
        } else {
            subwords.push(vocab.token(id).to_string());
        }
    }
    undo_bpe(&subwords)
}

/// Generate word-level constraints (and noise positions) for one corpus
/// under the configured scenario. Per-line seeds derive from `seed` and the
/// line index, so runs are reproducible line by line.
#[allow(clippy::too_many_arguments)]
pub fn generate_constraints(
    scenario: Scenario,
    k: usize,
    replace_p: f64,
    noise_count: Option<usize>,
    src_lines: &[String],
    ref_lines: Option<&[String]>,
    freq: &FrequencyTable,
    table: Option<&AlignmentTable>,
    seed: u64,
) -> Result<(Vec<Vec<String>>, Vec<Vec<usize>>)> {
    let mut constraints = Vec::with_capacity(src_lines.len());
    let mut positions = Vec::with_capacity(src_lines.len());
    for i in 0..src_lines.len() {
        let line_seed = mix(seed, i as u64);
        let (cons, pos) = match scenario {
            Scenario::Perfect => {
                let refs = ref_lines.ok_or_else(|| {
                    Error::Config("perfect constraints need references".to_string())
                })?;
                (
                    extract_perfect_constraints(&words_of(&refs[i]), freq, k),
                    Vec::new(),
                )
            }
            Scenario::Noisy => {
                let refs = ref_lines.ok_or_else(|| {
                    Error::Config("noisy constraints need references".to_string())
                })?;
                let table = table.ok_or_else(|| {
                    Error::Config("noisy constraints need an alignment table".to_string())
                })?;
                let reference = words_of(&refs[i]);
                let perfect = extract_perfect_constraints(&reference, freq, k);
                if perfect.is_empty() {
                    (perfect, Vec::new())
                } else {
                    match noise_count {
                        Some(n) => fixed_noise_count_sized(
                            &perfect,
                            &reference,
                            table,
                            n.min(perfect.len()),
                            line_seed,
                            perfect.len(),
                        )?,
                        None => inject_noise(&perfect, &reference, table, replace_p, line_seed)?,
                    }
                }
            }
            Scenario::Auto => {
                let table = table.ok_or_else(|| {
                    Error::Config("automatic constraints need an alignment table".to_string())
                })?;
                (
                    auto_constraints(&words_of(&src_lines[i]), freq, table, k),
                    Vec::new(),
                )
            }
        };
        constraints.push(cons);
        positions.push(pos);
    }
    Ok((constraints, positions))
}

/// Per-sentence decode bookkeeping for the sidecar metadata file.
#[derive(Debug, Clone)]
pub struct SentenceMeta {
    pub log_prob: f64,
    pub finished: bool,
    pub forced: bool,
    pub covered: usize,
    pub constraints: usize,
    pub micros: u128,
}

impl SentenceMeta {
    pub fn to_line(&self) -> String {
        format!(
            "{:.6}\t{}\t{}\t{}/{}\t{}",
            self.log_prob, self.finished, self.forced, self.covered, self.constraints, self.micros
        )
    }
}

fn run_decoder(
    model: &Model,
    mode: DecoderMode,
    x: &[u32],
    c: &ConstraintSet,
    beam: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    match mode {
        DecoderMode::Beam => beam_search(model, x, c, beam, max_len),
        DecoderMode::Gbs => grid_beam_search(model, x, c, beam, max_len),
        DecoderMode::Dba => dba_search(model, x, c, beam, max_len),
    }
}

/// Translate a corpus sentence by sentence. Returns word-level hypothesis
/// lines and per-sentence metadata.
pub fn translate_corpus(
    model: &Model,
    bundle: &TokenizerBundle,
    src_lines: &[String],
    constraints: &[Vec<String>],
    mode: DecoderMode,
    beam: usize,
) -> Result<(Vec<String>, Vec<SentenceMeta>)> {
    if src_lines.len() != constraints.len() {
        return Err(Error::LineCountMismatch {
            left_name: "source".to_string(),
            left: src_lines.len(),
            right_name: "constraints".to_string(),
            right: constraints.len(),
        });
    }
    let mut hyp_lines = Vec::with_capacity(src_lines.len());
    let mut metas = Vec::with_capacity(src_lines.len());
    for (line, cons_words) in src_lines.iter().zip(constraints) {
        let words: Vec<&str> = line.split_whitespace().collect();
        let x = bundle.src_vocab.ids(&apply_bpe(&bundle.src_bpe, &words));
        let c = encode_constraints(cons_words, &bundle.tgt_bpe, &bundle.tgt_vocab);
        let start = Instant::now();
        let result = run_decoder(model, mode, &x, &c, beam, model.config.max_len)?;
        let micros = start.elapsed().as_micros();
        let hyp_words = ids_to_words(&result.tokens, &bundle.tgt_vocab);
        hyp_lines.push(hyp_words.join(" "));
        metas.push(SentenceMeta {
            log_prob: result.log_prob,
            finished: result.finished,
            forced: result.forced,
            covered: result.covered.iter().filter(|&&b| b).count(),
            constraints: c.len(),
            micros,
        });
    }
    Ok((hyp_lines, metas))
}

/// Input files of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelinePaths {
    pub train_src: PathBuf,
    pub train_ref: PathBuf,
    pub test_src: PathBuf,
    pub test_ref: PathBuf,
    /// Constraints provided by the caller (scenarios 1-2); generated
    /// when absent or for scenario 3.
    pub test_constraints: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// What a pipeline run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub bleu: BleuReport,
    /// Fraction of test constraints absent from their references.
    pub test_noisy_rate: f64,
    pub sec_per_sentence: f64,
}

/// Run the whole experiment loop for the configured scenario: generate
/// training constraints, train and fine-tune, obtain test constraints
/// (provided or generated), translate, and evaluate. Artifacts land in
/// `out_dir` with a manifest.
pub fn run_pipeline(paths: &PipelinePaths, cfg: &RunConfig) -> Result<PipelineOutcome> {
    std::fs::create_dir_all(&paths.out_dir).map_err(|e| Error::io(&paths.out_dir, e))?;
    let out = |name: &str| paths.out_dir.join(name);
    std::fs::write(out("config.resolved.txt"), cfg.to_text())
        .map_err(|e| Error::io(out("config.resolved.txt"), e))?;

    let train_src = read_corpus(&paths.train_src)?;
    let train_ref = read_corpus(&paths.train_ref)?;
    let test_src = read_corpus(&paths.test_src)?;
    let test_ref = read_corpus(&paths.test_ref)?;
    if train_src.len() != train_ref.len() {
        return Err(Error::LineCountMismatch {
            left_name: paths.train_src.display().to_string(),
            left: train_src.len(),
            right_name: paths.train_ref.display().to_string(),
            right: train_ref.len(),
        });
    }
    if test_src.len() != test_ref.len() {
        return Err(Error::LineCountMismatch {
            left_name: paths.test_src.display().to_string(),
            left: test_src.len(),
            right_name: paths.test_ref.display().to_string(),
            right: test_ref.len(),
        });
    }

    // Subword machinery.
    let bundle = TokenizerBundle::learn(
        &train_src,
        &train_ref,
        cfg.merges,
        cfg.src_vocab_size,
        cfg.tgt_vocab_size,
    )?;
    std::fs::write(out("src.bpe"), bundle.src_bpe.to_text())
        .map_err(|e| Error::io(out("src.bpe"), e))?;
    std::fs::write(out("tgt.bpe"), bundle.tgt_bpe.to_text())
        .map_err(|e| Error::io(out("tgt.bpe"), e))?;
    std::fs::write(out("src.vocab"), bundle.src_vocab.to_text())
        .map_err(|e| Error::io(out("src.vocab"), e))?;
    std::fs::write(out("tgt.vocab"), bundle.tgt_vocab.to_text())
        .map_err(|e| Error::io(out("tgt.vocab"), e))?;

    // Word-level statistics and the translation table.
    let src_freq = FrequencyTable::from_lines(&train_src);
    let tgt_freq = FrequencyTable::from_lines(&train_ref);
    let word_pairs: Vec<(Vec<String>, Vec<String>)> = train_src
        .iter()
        .zip(&train_ref)
        .map(|(s, r)| (words_of(s), words_of(r)))
        .collect();
    let table = build_alignment_table(&word_pairs, cfg.em_iterations, cfg.prune_threshold)?;
    std::fs::write(out("table.tsv"), table.to_text()).map_err(|e| Error::io(out("table.tsv"), e))?;

    // Training constraints (Algorithm lines 1-3).
    let gen_freq = match cfg.scenario {
        Scenario::Auto => &src_freq,
        _ => &tgt_freq,
    };
    // Training-time noise is probabilistic (replace_p); the fixed-count
    // sweep applies to test sets only.
    let (train_cons, train_pos) = generate_constraints(
        cfg.scenario,
        cfg.k,
        cfg.replace_p,
        None,
        &train_src,
        Some(&train_ref),
        gen_freq,
        Some(&table),
        mix(cfg.seed, 0xc0),
    )?;
    write_lines(&out("constraints.train.tsv"), &constraints_to_lines(&train_cons))?;
    write_lines(
        &out("constraints.train.meta.tsv"),
        &noise_positions_to_lines(&train_pos),
    )?;

    // Test constraints: consumed verbatim when provided (scenarios 1-2),
    // generated otherwise (always generated for scenario 3).
    let (test_cons, test_pos) = match (&paths.test_constraints, cfg.scenario) {
        (Some(path), Scenario::Perfect | Scenario::Noisy) => {
            let lines = read_lines(path)?;
            (parse_constraint_lines(&lines)?, vec![Vec::new(); test_src.len()])
        }
        _ => generate_constraints(
            cfg.scenario,
            cfg.k,
            cfg.replace_p,
            cfg.noise_count,
            &test_src,
            Some(&test_ref),
            gen_freq,
            Some(&table),
            mix(cfg.seed, 0xc1),
        )?,
    };
    if test_cons.len() != test_src.len() {
        return Err(Error::LineCountMismatch {
            left_name: "test constraints".to_string(),
            left: test_cons.len(),
            right_name: "test source".to_string(),
            right: test_src.len(),
        });
    }
    write_lines(&out("constraints.test.tsv"), &constraints_to_lines(&test_cons))?;
    write_lines(
        &out("constraints.test.meta.tsv"),
        &noise_positions_to_lines(&test_pos),
    )?;

    // Train the baseline, then fine-tune the variant on constraints.
    let tuples = assemble_dataset(
        &train_src,
        &train_ref,
        Some(&train_cons),
        &bundle.src_bpe,
        &bundle.tgt_bpe,
        &bundle.src_vocab,
        &bundle.tgt_vocab,
    )?;
    let base_cfg = cfg.baseline_config(bundle.src_vocab.size(), bundle.tgt_vocab.size());
    let mut baseline = Model::init(base_cfg, cfg.seed)?;
    let base_opts = TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        quiet: true,
    };
    train(&mut baseline, &tuples, &base_opts)?;
    checkpoint::save(&baseline, &out("checkpoint.base.bin"))?;

    let final_model = if cfg.encoder != crate::model::ConstraintEncoderKind::None {
        let variant_cfg = cfg.model_config(bundle.src_vocab.size(), bundle.tgt_vocab.size());
        let mut variant = init_from_baseline(variant_cfg, &baseline, mix(cfg.seed, 0xf7))?;
        let ft_opts = TrainOptions {
            epochs: cfg.ft_epochs,
            seed: mix(cfg.seed, 0xf8),
            ..base_opts
        };
        train(&mut variant, &tuples, &ft_opts)?;
        checkpoint::save(&variant, &out("checkpoint.ft.bin"))?;
        variant
    } else {
        baseline
    };

    // Translate (Algorithm lines 5-12) and evaluate.
    let start = Instant::now();
    let (hyp_lines, metas) = translate_corpus(
        &final_model,
        &bundle,
        &test_src,
        &test_cons,
        cfg.decoder,
        cfg.beam,
    )?;
    let sec_per_sentence = start.elapsed().as_secs_f64() / test_src.len() as f64;
    write_lines(&out("hyp.txt"), &hyp_lines)?;
    let meta_lines: Vec<String> = metas.iter().map(|m| m.to_line()).collect();
    write_lines(&out("hyp.meta.tsv"), &meta_lines)?;

    let hyp_words: Vec<Vec<String>> = hyp_lines.iter().map(|l| words_of(l)).collect();
    let ref_words: Vec<Vec<String>> = test_ref.iter().map(|l| words_of(l)).collect();
    let bleu = bleu4(&hyp_words, &ref_words)?;
    let test_noisy_rate = noisy_rate(&test_cons, &ref_words)?;

    let mut report = String::new();
    report.push_str(&bleu.to_text());
    report.push('\n');
    report.push_str(&bleu.to_kv());
    report.push_str(&format!("noisy_rate={test_noisy_rate:.6}\n"));
    report.push_str(&format!("sec_per_sentence={sec_per_sentence:.6}\n"));
    std::fs::write(out("report.txt"), &report).map_err(|e| Error::io(out("report.txt"), e))?;

    // Manifest: hashes tying outputs to this configuration.
    let mut manifest = String::new();
    manifest.push_str(&format!(
        "config_sha256={}\n",
        sha256_hex(cfg.to_text().as_bytes())
    ));
    manifest.push_str(&format!("seed={}\n", cfg.seed));
    let mut artifacts = vec![
        "config.resolved.txt",
        "src.bpe",
        "tgt.bpe",
        "src.vocab",
        "tgt.vocab",
        "table.tsv",
        "constraints.train.tsv",
        "constraints.train.meta.tsv",
        "constraints.test.tsv",
        "constraints.test.meta.tsv",
        "checkpoint.base.bin",
        "hyp.txt",
        "hyp.meta.tsv",
        "report.txt",
    ];
    if out("checkpoint.ft.bin").exists() {
        artifacts.push("checkpoint.ft.bin");
    }
    for name in artifacts {
        let bytes = std::fs::read(out(name)).map_err(|e| Error::io(out(name), e))?;
        manifest.push_str(&format!("{name} sha256={}\n", sha256_hex(&bytes)));
    }
    std::fs::write(out("manifest.txt"), manifest).map_err(|e| Error::io(out("manifest.txt"), e))?;

    Ok(PipelineOutcome {
        bleu,
        test_noisy_rate,
        sec_per_sentence,
    })
}

/// Convenience used by tests and the runtime criterion: time one decoder
/// configuration over a prepared id-level test set.
pub fn mean_decode_seconds(
    model: &Model,
    sentences: &[(Vec<u32>, ConstraintSet)],
    mode: DecoderMode,
    beam: usize,
    repetitions: usize,
) -> Result<f64> {
    measure_runtime(sentences.len(), repetitions, |i| {
        let (x, c) = &sentences[i];
        run_decoder(model, mode, x, c, beam, model.config.max_len).map(|_| ())
    })
}
