//! Token/id vocabulary with fixed special ids.

use crate::error::{Error, Result};
use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bidirectional token/id map. Ids 0..=3 are reserved for the specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens: all, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Serialize non-special tokens, one per line; line i holds id i + 4.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens[SPECIALS.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut seen = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                return Err(Error::parse("vocabulary", format!("empty line {}", i + 1)));
            }
            if SPECIALS.contains(&line) {
                return Err(Error::parse(
                    "vocabulary",
                    format!("line {}: special token `{line}` not allowed", i + 1),
                ));
            }
            if seen.insert(line.to_string(), i).is_some() {
                return Err(Error::parse(
                    "vocabulary",
                    format!("line {}: duplicate token `{line}`", i + 1),
                ));
            }
            tokens.push(line.to_string());
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

/// Frequency-ranked vocabulary over a subword corpus, truncated to
/// `max_size` including the four specials. Ties break lexicographically.
pub fn build_vocab(lines: &[String], max_size: usize) -> Result<Vocabulary> {
    if max_size <= SPECIALS.len() {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} leaves no room beyond the {} specials",
            SPECIALS.len()
        )));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for line in lines {
        for tok in line.split_whitespace() {
            if !SPECIALS.contains(&tok) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - SPECIALS.len());
    Ok(Vocabulary::from_tokens(
        ranked.into_iter().map(|(t, _)| t.to_string()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_types_make_size_seven() {
        let corpus = vec!["a b c".to_string(), "a b".to_string()];
        let v = build_vocab(&corpus, 10).unwrap();
        assert_eq!(v.size(), 7);
    }

    #[test]
    fn id_token_bijection_and_unk() {
        let corpus = vec!["x y z y".to_string()];
        let v = build_vocab(&corpus, 10).unwrap();
        for id in 0..v.size() as u32 {
            assert_eq!(v.id(v.token(id)), id);
        }
        assert_eq!(v.id("never-seen"), UNK);
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let corpus = vec!["b b a a c".to_string()];
        let v = build_vocab(&corpus, 10).unwrap();
        // a and b tie at 2, a first; c last.
        assert_eq!(v.token(4), "a");
        assert_eq!(v.token(5), "b");
        assert_eq!(v.token(6), "c");
    }

    #[test]
    fn truncation_keeps_most_frequent() {
        let corpus = vec!["a a a b b c".to_string()];
        let v = build_vocab(&corpus, 6).unwrap();
        assert_eq!(v.size(), 6);
        assert!(v.contains("a"));
        assert!(v.contains("b"));
        assert!(!v.contains("c"));
    }

    #[test]
    fn stable_under_line_permutation() {
        let a = vec!["x y".to_string(), "z z".to_string()];
        let b = vec!["z z".to_string(), "x y".to_string()];
        assert_eq!(build_vocab(&a, 8).unwrap(), build_vocab(&b, 8).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let corpus = vec!["alpha beta gamma".to_string()];
        let v = build_vocab(&corpus, 10).unwrap();
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::parse("ok\n\nbad").is_err());
        assert!(Vocabulary::parse("<pad>\n").is_err());
        assert!(Vocabulary::parse("dup\ndup\n").is_err());
    }

    #[test]
    fn too_small_max_size_rejected() {
        assert!(build_vocab(&["a".to_string()], 4).is_err());
    }
}
