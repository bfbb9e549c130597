//! Constraint generation for the three scenarios — perfect (rare reference
//! words), noisy (table-driven replacing words), automatic (translations of
//! rare source words) — plus the word-to-word alignment table they share.
//!
//! The alignment table comes from a self-contained IBM Model 1 EM run over
//! the word-level training corpus; no external aligner is involved.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

/// Per-word corpus frequencies for one language side.
#[derive(Debug, Clone, Default)]
pub struct FrequencyTable {
    counts: HashMap<String, u64>,
}

impl FrequencyTable {
    pub fn from_lines(lines: &[String]) -> Self {
        let mut counts = HashMap::new();
        for line in lines {
            for word in line.split_whitespace() {
                *counts.entry(word.to_string()).or_insert(0) += 1;
            }
        }
        FrequencyTable { counts }
    }

    /// Corpus count; unseen words report 0 (rarest possible).
    pub fn count(&self, word: &str) -> u64 {
        self.counts.get(word).copied().unwrap_or(0)
    }

    #[cfg(test)]
    pub(crate) fn from_counts(counts: &[(&str, u64)]) -> Self {
        FrequencyTable {
            counts: counts.iter().map(|(w, c)| (w.to_string(), *c)).collect(),
        }
    }
}

/// Word-to-word translation table t(target | source), pruned and
/// renormalized, with a reverse index for replacing-word lookups.
#[derive(Debug, Clone, Default)]
pub struct AlignmentTable {
    /// source -> (target, prob), sorted by descending prob then target.
    entries: BTreeMap<String, Vec<(String, f64)>>,
    /// target -> source words it appears under.
    reverse: HashMap<String, BTreeSet<String>>,
}

impl AlignmentTable {
    fn from_entries(mut entries: BTreeMap<String, Vec<(String, f64)>>) -> Self {
        let mut reverse: HashMap<String, BTreeSet<String>> = HashMap::new();
        for (src, targets) in entries.iter_mut() {
            targets.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            for (tgt, _) in targets.iter() {
                reverse.entry(tgt.clone()).or_default().insert(src.clone());
            }
        }
        AlignmentTable { entries, reverse }
    }

    pub fn sources(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn translations(&self, source: &str) -> &[(String, f64)] {
        self.entries.get(source).map_or(&[], |v| v.as_slice())
    }

    /// Highest-probability translation of a source word.
    pub fn best_translation(&self, source: &str) -> Option<&str> {
        self.entries
            .get(source)
            .and_then(|v| v.first())
            .map(|(t, _)| t.as_str())
    }

    /// All target words sharing at least one source entry with `word`
    /// (excluding the word itself): the replacing-word relation.
    pub fn replacing_candidates(&self, word: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        if let Some(sources) = self.reverse.get(word) {
            for src in sources {
                for (tgt, _) in self.translations(src) {
                    if tgt != word {
                        out.insert(tgt.clone());
                    }
                }
            }
        }
        out
    }

    /// Every distinct target word in the table, sorted.
    pub fn target_vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = self.reverse.keys().cloned().collect();
        v.sort();
        v
    }

    /// One `source<TAB>target<TAB>prob` triple per line, sorted by source
    /// then descending probability.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (src, targets) in &self.entries {
            for (tgt, prob) in targets {
                out.push_str(&format!("{src}\t{tgt}\t{prob}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (src, tgt, prob) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(t), Some(p), None) if !s.is_empty() && !t.is_empty() => {
                    let prob: f64 = p.parse().map_err(|_| {
                        Error::parse("alignment table", format!("line {}: bad prob", i + 1))
                    })?;
                    (s, t, prob)
                }
                _ => {
                    return Err(Error::parse(
                        "alignment table",
                        format!("line {}: expected source<TAB>target<TAB>prob", i + 1),
                    ))
                }
            };
            if !(prob.is_finite() && 0.0 < prob && prob <= 1.0) {
                return Err(Error::parse(
                    "alignment table",
                    format!("line {}: prob {prob} outside (0,1]", i + 1),
                ));
            }
            let targets = entries.entry(src.to_string()).or_default();
            if targets.iter().any(|(t, _)| t == tgt) {
                return Err(Error::parse(
                    "alignment table",
                    format!("line {}: duplicate pair {src}/{tgt}", i + 1),
                ));
            }
            targets.push((tgt.to_string(), prob));
        }
        Ok(AlignmentTable::from_entries(entries))
    }
}

/// IBM Model 1 translation probabilities via expectation maximization over
/// a word-level parallel corpus, followed by threshold pruning and
/// per-source renormalization.
pub fn build_alignment_table(
    pairs: &[(Vec<String>, Vec<String>)],
    em_iterations: usize,
    prune_threshold: f64,
) -> Result<AlignmentTable> {
    if pairs.iter().all(|(s, t)| s.is_empty() || t.is_empty()) {
        return Err(Error::EmptyInput("alignment corpus"));
    }
    if em_iterations == 0 {
        return Err(Error::Config("EM iterations must be >= 1".to_string()));
    }

    // Intern words for the EM inner loops.
    let mut src_ids: HashMap<&str, usize> = HashMap::new();
    let mut tgt_ids: HashMap<&str, usize> = HashMap::new();
    let mut src_words: Vec<&str> = Vec::new();
    let mut tgt_words: Vec<&str> = Vec::new();
    let mut sentences: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for (src, tgt) in pairs {
        if src.is_empty() || tgt.is_empty() {
            continue;
        }
        let s: Vec<usize> = src
            .iter()
            .map(|w| {
                *src_ids.entry(w).or_insert_with(|| {
                    src_words.push(w);
                    src_words.len() - 1
                })
            })
            .collect();
        let t: Vec<usize> = tgt
            .iter()
            .map(|w| {
                *tgt_ids.entry(w).or_insert_with(|| {
                    tgt_words.push(w);
                    tgt_words.len() - 1
                })
            })
            .collect();
        sentences.push((s, t));
    }

    // t(y|x) restricted to co-occurring pairs, initialized uniform.
    let mut cooc: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); src_words.len()];
    for (s, t) in &sentences {
        for &x in s {
            for &y in t {
                cooc[x].insert(y);
            }
        }
    }
    let mut prob: Vec<HashMap<usize, f64>> = cooc
        .iter()
        .map(|ys| {
            let u = 1.0 / ys.len() as f64;
            ys.iter().map(|&y| (y, u)).collect()
        })
        .collect();

    for _ in 0..em_iterations {
        let mut counts: Vec<HashMap<usize, f64>> = vec![HashMap::new(); src_words.len()];
        let mut totals: Vec<f64> = vec![0.0; src_words.len()];
        for (s, t) in &sentences {
            for &y in t {
                let denom: f64 = s.iter().map(|&x| prob[x][&y]).sum();
                for &x in s {
                    let share = prob[x][&y] / denom;
                    *counts[x].entry(y).or_insert(0.0) += share;
                    totals[x] += share;
                }
            }
        }
        for x in 0..src_words.len() {
            if totals[x] > 0.0 {
                for (&y, &c) in counts[x].iter() {
                    prob[x].insert(y, c / totals[x]);
                }
            }
        }
    }

    // Prune and renormalize.
    let mut entries: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for x in 0..src_words.len() {
        let mut kept: Vec<(String, f64)> = prob[x]
            .iter()
            .filter(|(_, &p)| p >= prune_threshold)
            .map(|(&y, &p)| (tgt_words[y].to_string(), p))
            .collect();
        if kept.is_empty() {
            continue;
        }
        let total: f64 = kept.iter().map(|(_, p)| p).sum();
        for (_, p) in kept.iter_mut() {
            *p /= total;
        }
        entries.insert(src_words[x].to_string(), kept);
    }
    Ok(AlignmentTable::from_entries(entries))
}

/// Unpruned per-source translation probabilities; used where the raw EM
/// result matters (tests, diagnostics).
pub fn em_probabilities(
    pairs: &[(Vec<String>, Vec<String>)],
    em_iterations: usize,
) -> Result<AlignmentTable> {
    build_alignment_table(pairs, em_iterations, 0.0)
}

fn is_punctuation_only(word: &str) -> bool {
    !word.chars().any(|c| c.is_alphanumeric())
}

/// Distinct eligible words of a sentence with their first positions:
/// punctuation-only tokens are skipped, duplicates keep their first slot.
fn eligible_words(sentence: &[String]) -> Vec<(usize, &String)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, w) in sentence.iter().enumerate() {
        if is_punctuation_only(w) || !seen.insert(w.as_str()) {
            continue;
        }
        out.push((i, w));
    }
    out
}

/// The k rarest words of a sentence under a frequency table, rarest first
/// by corpus count (ties to the earlier position), returned in sentence
/// order.
fn rarest_words(sentence: &[String], freq: &FrequencyTable, k: usize) -> Vec<String> {
    let mut eligible = eligible_words(sentence);
    eligible.sort_by_key(|(pos, w)| (freq.count(w), *pos));
    let mut chosen: Vec<(usize, &String)> = eligible.into_iter().take(k).collect();
    chosen.sort_by_key(|(pos, _)| *pos);
    chosen.into_iter().map(|(_, w)| w.clone()).collect()
}

/// Scenario 1: the top-k rare words of the reference, in reference order.
pub fn extract_perfect_constraints(
    reference: &[String],
    freq: &FrequencyTable,
    k: usize,
) -> Vec<String> {
    rarest_words(reference, freq, k)
}

/// Scenario 3: translations (via the table) of the top-k rare source words;
/// source words absent from the table are skipped.
pub fn auto_constraints(
    source: &[String],
    src_freq: &FrequencyTable,
    table: &AlignmentTable,
    k: usize,
) -> Vec<String> {
    rarest_words(source, src_freq, k)
        .into_iter()
        .filter_map(|w| table.best_translation(&w).map(|t| t.to_string()))
        .collect()
}

fn pick_replacement(
    word: &str,
    reference: &[String],
    table: &AlignmentTable,
    rng: &mut ChaCha20Rng,
) -> Option<String> {
    let ref_words: HashSet<&str> = reference.iter().map(|s| s.as_str()).collect();
    let candidates: Vec<String> = table
        .replacing_candidates(word)
        .into_iter()
        .filter(|w| !ref_words.contains(w.as_str()))
        .collect();
    if !candidates.is_empty() {
        return Some(candidates[rng.gen_range(0..candidates.len())].clone());
    }
    // No replacing word survives: fall back to any table target outside the
    // reference.
    let fallback: Vec<String> = table
        .target_vocabulary()
        .into_iter()
        .filter(|w| !ref_words.contains(w.as_str()))
        .collect();
    if fallback.is_empty() {
        return None; // reference covers the whole vocabulary; keep the word
    }
    Some(fallback[rng.gen_range(0..fallback.len())].clone())
}

/// Scenario 2 (probabilistic): independently replace each constraint with
/// probability `p` by a replacing word that does not occur in the
/// reference. Returns the noisy constraints and the replaced positions.
pub fn inject_noise(
    constraints: &[String],
    reference: &[String],
    table: &AlignmentTable,
    p: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!(
            "replace probability {p} outside [0,1]"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = constraints.to_vec();
    let mut positions = Vec::new();
    for i in 0..out.len() {
        if rng.gen::<f64>() < p {
            if let Some(repl) = pick_replacement(&constraints[i], reference, table, &mut rng) {
                out[i] = repl;
                positions.push(i);
            }
        }
    }
    Ok((out, positions))
}

/// Scenario 2 (fixed count): noise exactly `n` of 5 constraints, positions
/// uniform without replacement. For one seed the position sets are nested
/// across n and each position keeps its replacement word, so noise sweeps
/// differ only by how many corruptions are revealed.
pub fn fixed_noise_count(
    constraints: &[String],
    reference: &[String],
    table: &AlignmentTable,
    n: usize,
    seed: u64,
) -> Result<(Vec<String>, Vec<usize>)> {
    fixed_noise_count_sized(constraints, reference, table, n, seed, 5)
}

/// Generalization of [`fixed_noise_count`] to other constraint set sizes.
pub fn fixed_noise_count_sized(
    constraints: &[String],
    reference: &[String],
    table: &AlignmentTable,
    n: usize,
    seed: u64,
    required_size: usize,
) -> Result<(Vec<String>, Vec<usize>)> {
    if constraints.len() != required_size {
        return Err(Error::Config(format!(
            "fixed-count noise needs exactly {required_size} constraints, got {}",
            constraints.len()
        )));
    }
    if n == 0 || n > constraints.len() {
        return Err(Error::Config(format!(
            "noise count {n} outside 1..={}",
            constraints.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..constraints.len()).collect();
    order.shuffle(&mut rng);
    let mut out = constraints.to_vec();
    let mut positions: Vec<usize> = Vec::with_capacity(n);
    for &pos in order.iter().take(n) {
        // Position-keyed rng: a slot gets the same replacement no matter how
        // many other slots are noised.
        let mut pos_rng =
            ChaCha20Rng::seed_from_u64(seed ^ ((pos as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15)));
        if let Some(repl) = pick_replacement(&constraints[pos], reference, table, &mut pos_rng) {
            out[pos] = repl;
            positions.push(pos);
        }
    }
    positions.sort_unstable();
    Ok((out, positions))
}

/// Fraction of constraints not present in their reference: the noisy rate.
pub fn noisy_rate(constraints: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if constraints.len() != references.len() {
        return Err(Error::LineCountMismatch {
            left_name: "constraints".to_string(),
            left: constraints.len(),
            right_name: "references".to_string(),
            right: references.len(),
        });
    }
    let mut total = 0usize;
    let mut noisy = 0usize;
    for (cons, reference) in constraints.iter().zip(references) {
        let ref_words: HashSet<&str> = reference.iter().map(|s| s.as_str()).collect();
        for w in cons {
            total += 1;
            if !ref_words.contains(w.as_str()) {
                noisy += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        noisy as f64 / total as f64
    })
}

/// Serialize per-sentence constraint words: tab-separated, empty line for
/// an empty set.
pub fn constraints_to_lines(constraints: &[Vec<String>]) -> Vec<String> {
    constraints.iter().map(|c| c.join("\t")).collect()
}

/// Parse a constraints file (one line per sentence, tab-separated words).
pub fn parse_constraint_lines(lines: &[String]) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.is_empty() {
            out.push(Vec::new());
            continue;
        }
        let mut words = Vec::new();
        for w in line.split('\t') {
            if w.is_empty() || w.chars().any(|ch| ch.is_whitespace()) {
                return Err(Error::parse(
                    "constraints file",
                    format!("line {}: bad constraint word `{w}`", i + 1),
                ));
            }
            words.push(w.to_string());
        }
        out.push(words);
    }
    Ok(out)
}

/// Serialize noise positions: comma-separated zero-based indices per line.
pub fn noise_positions_to_lines(positions: &[Vec<usize>]) -> Vec<String> {
    positions
        .iter()
        .map(|p| {
            p.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect()
}

pub fn parse_noise_position_lines(lines: &[String]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.is_empty() {
            out.push(Vec::new());
            continue;
        }
        let mut positions = Vec::new();
        for part in line.split(',') {
            let idx: usize = part.parse().map_err(|_| {
                Error::parse(
                    "noise positions",
                    format!("line {}: bad index `{part}`", i + 1),
                )
            })?;
            positions.push(idx);
        }
        out.push(positions);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    fn pairs(spec: &[(&str, &str)]) -> Vec<(Vec<String>, Vec<String>)> {
        spec.iter().map(|(s, t)| (words(s), words(t))).collect()
    }

    /// Independent dense-array EM used as the oracle for the library EM.
    fn reference_em(
        pairs: &[(Vec<String>, Vec<String>)],
        iters: usize,
    ) -> (Vec<String>, Vec<String>, Vec<Vec<f64>>) {
        let mut srcs: Vec<String> = Vec::new();
        let mut tgts: Vec<String> = Vec::new();
        for (s, t) in pairs {
            for w in s {
                if !srcs.contains(w) {
                    srcs.push(w.clone());
                }
            }
            for w in t {
                if !tgts.contains(w) {
                    tgts.push(w.clone())
                }
            }
        }
        let (ns, nt) = (srcs.len(), tgts.len());
        let idx = |v: &[String], w: &String| v.iter().position(|x| x == w).unwrap();
        let mut cooc = vec![vec![false; nt]; ns];
        for (s, t) in pairs {
            for w in s {
                for y in t {
                    cooc[idx(&srcs, w)][idx(&tgts, y)] = true;
                }
            }
        }
        let mut prob = vec![vec![0.0; nt]; ns];
        for x in 0..ns {
            let n = cooc[x].iter().filter(|&&b| b).count() as f64;
            for y in 0..nt {
                if cooc[x][y] {
                    prob[x][y] = 1.0 / n;
                }
            }
        }
        for _ in 0..iters {
            let mut count = vec![vec![0.0; nt]; ns];
            for (s, t) in pairs {
                for yw in t {
                    let y = idx(&tgts, yw);
                    let denom: f64 = s.iter().map(|xw| prob[idx(&srcs, xw)][y]).sum();
                    for xw in s {
                        count[idx(&srcs, xw)][y] += prob[idx(&srcs, xw)][y] / denom;
                    }
                }
            }
            for x in 0..ns {
                let total: f64 = count[x].iter().sum();
                if total > 0.0 {
                    for y in 0..nt {
                        prob[x][y] = count[x][y] / total;
                    }
                }
            }
        }
        (srcs, tgts, prob)
    }

    #[test]
    fn copy_corpus_is_certain() {
        let table = build_alignment_table(&pairs(&[("a a", "a a")]), 3, 0.0).unwrap();
        let t = table.translations("a");
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].0, "a");
        assert!((t[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn em_matches_independent_reference_implementation() {
        // Corpus with a disambiguating singleton: EM must converge toward
        // a->A, b->B. Checked against a separate dense-array EM.
        let corpus = pairs(&[("a", "A"), ("a b", "A B"), ("b a", "B A")]);
        for iters in [1, 3, 7] {
            let table = em_probabilities(&corpus, iters).unwrap();
            let (srcs, tgts, prob) = reference_em(&corpus, iters);
            for (xi, xw) in srcs.iter().enumerate() {
                for (yi, yw) in tgts.iter().enumerate() {
                    let got = table
                        .translations(xw)
                        .iter()
                        .find(|(t, _)| t == yw)
                        .map_or(0.0, |(_, p)| *p);
                    assert!(
                        (got - prob[xi][yi]).abs() < 1e-9,
                        "iters {iters} t({yw}|{xw}): {got} vs {}",
                        prob[xi][yi]
                    );
                }
            }
        }
        let table = em_probabilities(&corpus, 5).unwrap();
        assert_eq!(table.best_translation("a"), Some("A"));
        assert_eq!(table.best_translation("b"), Some("B"));
    }

    #[test]
    fn position_symmetric_corpus_stays_uniform() {
        // {(a b, A B), (b a, B A)} carries no position-free signal, so IBM
        // Model 1 EM sits at the uniform fixpoint: a genuine tie.
        let table = em_probabilities(&pairs(&[("a b", "A B"), ("b a", "B A")]), 5).unwrap();
        for src in ["a", "b"] {
            for (_, p) in table.translations(src) {
                assert!((p - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn per_source_probabilities_sum_to_one() {
        let corpus = pairs(&[("x y z", "X Y Z"), ("x", "X"), ("y z", "Z Y")]);
        let table = em_probabilities(&corpus, 4).unwrap();
        for src in table.sources() {
            let sum: f64 = table.translations(src).iter().map(|(_, p)| p).sum();
            assert!((sum - 1.0).abs() < 1e-6, "{src}: {sum}");
        }
    }

    #[test]
    fn pruning_renormalizes() {
        let corpus = pairs(&[("a", "A"), ("a b", "A B"), ("b a", "B A"), ("a", "A")]);
        let table = build_alignment_table(&corpus, 5, 0.3).unwrap();
        for src in table.sources() {
            let sum: f64 = table.translations(src).iter().map(|(_, p)| p).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for (_, p) in table.translations(src) {
                assert!(*p > 0.0);
            }
        }
    }

    #[test]
    fn alignment_rejects_empty_and_zero_iters() {
        assert!(build_alignment_table(&[], 3, 0.0).is_err());
        assert!(build_alignment_table(&pairs(&[("a", "A")]), 0, 0.0).is_err());
    }

    #[test]
    fn table_file_round_trip_and_garbage() {
        let corpus = pairs(&[("a", "A"), ("a b", "A B"), ("c", "C")]);
        let table = build_alignment_table(&corpus, 3, 0.05).unwrap();
        let text = table.to_text();
        let parsed = AlignmentTable::parse(&text).unwrap();
        assert_eq!(parsed.to_text(), text);
        assert!(AlignmentTable::parse("a\tb\n").is_err());
        assert!(AlignmentTable::parse("a\tb\tnope\n").is_err());
        assert!(AlignmentTable::parse("a\tb\t2.0\n").is_err());
        assert!(AlignmentTable::parse("a\tb\t0.5\na\tb\t0.5\n").is_err());
    }

    #[test]
    fn perfect_constraints_hand_sorted() {
        let freq = FrequencyTable::from_counts(&[
            ("the", 1000),
            ("cat", 50),
            ("xylophone", 1),
            ("sat", 40),
        ]);
        let r = words("the cat xylophone sat");
        let got = extract_perfect_constraints(&r, &freq, 2);
        assert_eq!(got, words("xylophone sat"));
    }

    #[test]
    fn perfect_constraints_saturate_and_degenerate() {
        let freq = FrequencyTable::from_lines(&["a b c".to_string()]);
        let r = words("a b");
        assert_eq!(extract_perfect_constraints(&r, &freq, 10), words("a b"));
        assert!(extract_perfect_constraints(&r, &freq, 0).is_empty());
    }

    #[test]
    fn perfect_constraints_skip_punctuation_and_duplicates() {
        let freq = FrequencyTable::from_lines(&["w w w v v u".to_string()]);
        let r = words("w , w v !! u");
        let got = extract_perfect_constraints(&r, &freq, 3);
        assert_eq!(got, words("w v u"));
    }

    #[test]
    fn replacing_candidates_definition() {
        let table = AlignmentTable::parse("a\tA\t0.6\na\tB\t0.4\n").unwrap();
        assert_eq!(
            table
                .replacing_candidates("A")
                .into_iter()
                .collect::<Vec<_>>(),
            vec!["B".to_string()]
        );
        assert!(table.replacing_candidates("missing").is_empty());
        let three = AlignmentTable::parse("a\tA\t0.5\na\tB\t0.3\na\tC\t0.2\n").unwrap();
        let got: Vec<String> = three.replacing_candidates("A").into_iter().collect();
        assert_eq!(got, vec!["B".to_string(), "C".to_string()]);
    }

    #[test]
    fn replacing_relation_is_symmetric() {
        let corpus = pairs(&[("a", "A"), ("a", "B"), ("b", "B"), ("b", "C"), ("c", "D")]);
        let table = build_alignment_table(&corpus, 3, 0.01).unwrap();
        let vocab = table.target_vocabulary();
        for y in &vocab {
            for y2 in table.replacing_candidates(y) {
                assert!(
                    table.replacing_candidates(&y2).contains(y),
                    "{y} -> {y2} not symmetric"
                );
            }
        }
    }

    fn rich_table() -> AlignmentTable {
        let mut text = String::new();
        for i in 0..20 {
            text.push_str(&format!("s{i}\tt{i}\t0.6\n"));
            text.push_str(&format!("s{i}\tu{i}\t0.4\n"));
        }
        AlignmentTable::parse(&text).unwrap()
    }

    #[test]
    fn inject_noise_p_zero_and_one() {
        let table = rich_table();
        let c = words("t1 t2 t3");
        let r = words("t1 t2 t3 t4");
        let (same, pos) = inject_noise(&c, &r, &table, 0.0, 9).unwrap();
        assert_eq!(same, c);
        assert!(pos.is_empty());
        let (noisy, pos) = inject_noise(&c, &r, &table, 1.0, 9).unwrap();
        assert_eq!(pos, vec![0, 1, 2]);
        for w in &noisy {
            assert!(!r.contains(w), "{w} still in reference");
        }
    }

    #[test]
    fn inject_noise_monte_carlo_rate() {
        let table = rich_table();
        let c = words("t1 t2 t3 t4 t5");
        let r = words("t1 t2 t3 t4 t5");
        let mut replaced = 0usize;
        let mut total = 0usize;
        for seed in 0..2000u64 {
            let (_, pos) = inject_noise(&c, &r, &table, 0.6, seed).unwrap();
            replaced += pos.len();
            total += c.len();
        }
        let rate = replaced as f64 / total as f64;
        assert!((0.59..=0.61).contains(&rate), "rate {rate}");
    }

    #[test]
    fn inject_noise_is_deterministic() {
        let table = rich_table();
        let c = words("t1 t2 t3");
        let r = words("t9");
        let a = inject_noise(&c, &r, &table, 0.5, 1234).unwrap();
        let b = inject_noise(&c, &r, &table, 0.5, 1234).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_noise_counts_and_errors() {
        let table = rich_table();
        let c = words("t1 t2 t3 t4 t5");
        let r = c.clone();
        let (noisy, pos) = fixed_noise_count(&c, &r, &table, 5, 7).unwrap();
        assert_eq!(pos.len(), 5);
        for w in &noisy {
            assert!(!r.contains(w));
        }
        let (noisy1, pos1) = fixed_noise_count(&c, &r, &table, 1, 7).unwrap();
        assert_eq!(pos1.len(), 1);
        let survivors = noisy1.iter().filter(|w| c.contains(w)).count();
        assert_eq!(survivors, 4);
        assert!(fixed_noise_count(&words("t1 t2"), &r, &table, 1, 7).is_err());
        assert!(fixed_noise_count(&c, &r, &table, 0, 7).is_err());
        assert!(fixed_noise_count(&c, &r, &table, 6, 7).is_err());
    }

    #[test]
    fn fixed_noise_is_nested_across_counts() {
        let table = rich_table();
        let c = words("t1 t2 t3 t4 t5");
        let r = c.clone();
        for seed in [3u64, 99, 4242] {
            let mut last: Option<(Vec<String>, Vec<usize>)> = None;
            for n in 1..=5 {
                let (noisy, pos) = fixed_noise_count(&c, &r, &table, n, seed).unwrap();
                if let Some((prev_noisy, prev_pos)) = &last {
                    for p in prev_pos {
                        assert!(pos.contains(p), "positions not nested");
                        assert_eq!(prev_noisy[*p], noisy[*p], "replacement changed");
                    }
                }
                last = Some((noisy, pos));
            }
        }
    }

    #[test]
    fn fixed_noise_positions_are_uniform() {
        let table = rich_table();
        let c = words("t1 t2 t3 t4 t5");
        let r = c.clone();
        let mut hist = [0u64; 5];
        let trials = 10_000u64;
        for seed in 0..trials {
            let (_, pos) = fixed_noise_count(&c, &r, &table, 1, seed).unwrap();
            hist[pos[0]] += 1;
        }
        let expected = trials as f64 / 5.0;
        let chi2: f64 = hist
            .iter()
            .map(|&h| {
                let d = h as f64 - expected;
                d * d / expected
            })
            .sum();
        // chi-square with 4 degrees of freedom, p > 0.01 cutoff
        assert!(chi2 < 13.277, "chi2 {chi2}, hist {hist:?}");
    }

    #[test]
    fn auto_constraints_bijective_lookup() {
        let mut text = String::new();
        for (s, t) in [("alpha", "ALPHA"), ("beta", "BETA"), ("gamma", "GAMMA")] {
            text.push_str(&format!("{s}\t{t}\t1\n"));
        }
        let table = AlignmentTable::parse(&text).unwrap();
        let src_freq = FrequencyTable::from_lines(&[
            "alpha alpha alpha beta beta gamma common common common common".to_string(),
        ]);
        let x = words("common alpha beta gamma");
        let got = auto_constraints(&x, &src_freq, &table, 2);
        assert_eq!(got, words("BETA GAMMA"));
        let all = auto_constraints(&x, &src_freq, &table, 3);
        assert_eq!(all, words("ALPHA BETA GAMMA"));
        // Unknown source words are skipped.
        let none = auto_constraints(&words("zzz qqq"), &src_freq, &table, 2);
        assert!(none.is_empty());
    }

    #[test]
    fn noisy_rate_counts_words_outside_reference() {
        let cons = vec![words("a b"), words("c"), vec![]];
        let refs = vec![words("a x"), words("c"), words("y")];
        let rate = noisy_rate(&cons, &refs).unwrap();
        assert!((rate - 1.0 / 3.0).abs() < 1e-12);
        assert!(noisy_rate(&cons, &refs[..2].to_vec()).is_err());
    }

    #[test]
    fn constraint_file_round_trip() {
        let cons = vec![words("a b"), vec![], words("xyz")];
        let lines = constraints_to_lines(&cons);
        assert_eq!(parse_constraint_lines(&lines).unwrap(), cons);
        assert!(parse_constraint_lines(&["a\t\tb".to_string()]).is_err());
        assert!(parse_constraint_lines(&["a b".to_string()]).is_err());
    }

    #[test]
    fn noise_position_file_round_trip() {
        let pos = vec![vec![0, 3], vec![], vec![2]];
        let lines = noise_positions_to_lines(&pos);
        assert_eq!(parse_noise_position_lines(&lines).unwrap(), pos);
        assert!(parse_noise_position_lines(&["1,x".to_string()]).is_err());
    }
}
