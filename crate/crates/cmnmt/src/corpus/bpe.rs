//! Byte pair encoding: greedy most-frequent-pair merging with an
//! end-of-word marker symbol, reversible by construction.

use crate::error::{Error, Result};
use std::collections::HashMap;

/// End-of-word marker appended as a separate symbol before merging.
pub const WORD_END: &str = "</w>";

/// A learned BPE model: an ordered list of merges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        BpeModel { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Subword vocabulary implied by the merges over a corpus is open-ended;
    /// the merge list itself is the model.
    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    /// Serialize: header line with the merge count, then one merge per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.merges.len());
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("bpe model", "missing header line"))?;
        let count: usize = header
            .trim()
            .parse()
            .map_err(|_| Error::parse("bpe model", format!("bad merge count `{header}`")))?;
        if count > 1_000_000 {
            return Err(Error::parse("bpe model", "merge count exceeds limit"));
        }
        let mut merges = Vec::with_capacity(count.min(65_536));
        for (i, line) in lines.enumerate() {
            if i >= count {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(Error::parse("bpe model", "trailing content after merges"));
            }
            let mut parts = line.split(' ');
            let (left, right) = match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => (l, r),
                _ => {
                    return Err(Error::parse(
                        "bpe model",
                        format!("line {}: expected `left right`", i + 2),
                    ))
                }
            };
            merges.push((left.to_string(), right.to_string()));
        }
        if merges.len() != count {
            return Err(Error::parse(
                "bpe model",
                format!("header says {count} merges, found {}", merges.len()),
            ));
        }
        Ok(BpeModel::from_merges(merges))
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    symbols.push(WORD_END.to_string());
    symbols
}

/// Learn a BPE model from whitespace-tokenized lines. Ties between equally
/// frequent pairs break lexicographically, so learning is deterministic.
pub fn learn_bpe(lines: &[String], merges: usize) -> Result<BpeModel> {
    let mut word_freq: HashMap<Vec<String>, u64> = HashMap::new();
    for line in lines {
        for word in line.split_whitespace() {
            *word_freq.entry(word_symbols(word)).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::EmptyInput("bpe corpus"));
    }

    let mut words: Vec<(Vec<String>, u64)> = word_freq.into_iter().collect();
    words.sort(); // deterministic iteration
    let mut learned = Vec::with_capacity(merges);
    for _ in 0..merges {
        let mut pair_freq: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, freq) in &words {
            for w in symbols.windows(2) {
                *pair_freq.entry((&w[0], &w[1])).or_insert(0) += freq;
            }
        }
        let best = pair_freq
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((left, right), _)) = best else {
            break; // every word is a single symbol already
        };
        let pair = (left.to_string(), right.to_string());
        for (symbols, _) in words.iter_mut() {
            merge_pair(symbols, &pair.0, &pair.1);
        }
        learned.push(pair);
    }
    Ok(BpeModel::from_merges(learned))
}

/// Merge every non-overlapping occurrence of (left, right), left to right.
fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

/// Apply a learned model to words, producing a flat subword token stream.
/// Every word ends in a token carrying the end-of-word marker.
pub fn apply_bpe<S: AsRef<str>>(model: &BpeModel, words: &[S]) -> Vec<String> {
    let mut out = Vec::new();
    for word in words {
        let mut symbols = word_symbols(word.as_ref());
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..symbols.len().saturating_sub(1) {
                let key = (symbols[i].clone(), symbols[i + 1].clone());
                if let Some(&rank) = model.ranks.get(&key) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (left, right) = model.merges[rank].clone();
            merge_pair(&mut symbols, &left, &right);
        }
        out.extend(symbols);
    }
    out
}

/// Invert [`apply_bpe`]: join subwords and split words at end-of-word
/// markers. A trailing run without a marker (possible in raw model output)
/// is flushed as a final word.
pub fn undo_bpe<S: AsRef<str>>(subwords: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for token in subwords {
        let token = token.as_ref();
        if let Some(stripped) = token.strip_suffix(WORD_END) {
            current.push_str(stripped);
            words.push(std::mem::take(&mut current));
        } else {
            current.push_str(token);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lines(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn zero_merges_is_character_level() {
        let model = learn_bpe(&lines(&["ab ba"]), 0).unwrap();
        assert_eq!(model.merge_count(), 0);
        let toks = apply_bpe(&model, &["ab"]);
        assert_eq!(toks, vec!["a", "b", WORD_END]);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // "aaab aaab": pair (a,a) occurs twice per word, beating (a,b).
        let model = learn_bpe(&lines(&["aaab aaab"]), 1).unwrap();
        assert_eq!(model.merges(), &[("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn learning_is_deterministic() {
        let corpus = lines(&["the cat sat", "the bat", "a cat"]);
        let m1 = learn_bpe(&corpus, 12).unwrap();
        let m2 = learn_bpe(&corpus, 12).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(learn_bpe(&lines(&["", "   "]), 3).is_err());
    }

    #[test]
    fn frequent_word_collapses_to_single_token() {
        let corpus = lines(&["hello hello hello hello", "hello there"]);
        let model = learn_bpe(&corpus, 20).unwrap();
        let toks = apply_bpe(&model, &["hello"]);
        assert_eq!(toks.len(), 1, "{toks:?}");
        assert_eq!(toks[0], format!("hello{WORD_END}"));
    }

    #[test]
    fn round_trip_examples() {
        let model = learn_bpe(&lines(&["abc abd xyz"]), 5).unwrap();
        for word in ["abc", "abd", "xyz", "unseen", "q"] {
            let toks = apply_bpe(&model, &[word]);
            assert_eq!(undo_bpe(&toks), vec![word.to_string()]);
        }
        assert!(apply_bpe(&model, &[] as &[&str]).is_empty());
        assert!(undo_bpe(&[] as &[&str]).is_empty());
    }

    #[test]
    fn model_file_round_trip_and_rejects_garbage() {
        let model = learn_bpe(&lines(&["banana bandana"]), 7).unwrap();
        let text = model.to_text();
        assert_eq!(BpeModel::parse(&text).unwrap(), model);
        assert!(BpeModel::parse("").is_err());
        assert!(BpeModel::parse("x\n").is_err());
        assert!(BpeModel::parse("2\na b\n").is_err());
        assert!(BpeModel::parse("1\na b c\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_random_words(
            words in proptest::collection::vec("[abcd]{1,8}", 1..12),
            merges in 0usize..30,
        ) {
            let corpus = vec![words.join(" ")];
            let model = learn_bpe(&corpus, merges).unwrap();
            let toks = apply_bpe(&model, &words);
            prop_assert_eq!(undo_bpe(&toks), words);
        }
    }
}
