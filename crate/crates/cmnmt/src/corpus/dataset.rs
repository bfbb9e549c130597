//! Assembly of (source, reference, constraints) training tuples from
//! line-aligned text files.

use super::bpe::{apply_bpe, BpeModel};
use super::vocab::{Vocabulary, EOS};
use crate::cmem::{Constraint, ConstraintSet};
use crate::error::{Error, Result};

/// One training or evaluation example, fully tokenized.
#[derive(Debug, Clone)]
pub struct DatasetTuple {
    pub source_ids: Vec<u32>,
    /// Ends with the eos id.
    pub reference_ids: Vec<u32>,
    pub constraints: ConstraintSet,
}

/// Tokenize one word-level sentence to subword ids.
pub fn encode_sentence(line: &str, bpe: &BpeModel, vocab: &Vocabulary) -> Vec<u32> {
    let words: Vec<&str> = line.split_whitespace().collect();
    vocab.ids(&apply_bpe(bpe, &words))
}

/// Re-tokenize word-level constraints through the target BPE and vocabulary.
pub fn encode_constraints(words: &[String], bpe: &BpeModel, vocab: &Vocabulary) -> ConstraintSet {
    ConstraintSet::new(
        words
            .iter()
            .map(|w| Constraint {
                surface: w.clone(),
                tokens: vocab.ids(&apply_bpe(bpe, &[w.as_str()])),
            })
            .collect(),
    )
}

/// Build dataset tuples from line-aligned sources, references, and optional
/// word-level constraints (one `Vec<String>` per line, empty = none).
pub fn assemble_dataset(
    src_lines: &[String],
    ref_lines: &[String],
    constraint_lines: Option<&[Vec<String>]>,
    src_bpe: &BpeModel,
    tgt_bpe: &BpeModel,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Vec<DatasetTuple>> {
    if src_lines.len() != ref_lines.len() {
        return Err(Error::LineCountMismatch {
            left_name: "source".to_string(),
            left: src_lines.len(),
            right_name: "reference".to_string(),
            right: ref_lines.len(),
        });
    }
    if let Some(cons) = constraint_lines {
        if cons.len() != src_lines.len() {
            return Err(Error::LineCountMismatch {
                left_name: "source".to_string(),
                left: src_lines.len(),
                right_name: "constraints".to_string(),
                right: cons.len(),
            });
        }
    }
    let mut tuples = Vec::with_capacity(src_lines.len());
    for i in 0..src_lines.len() {
        let source_ids = encode_sentence(&src_lines[i], src_bpe, src_vocab);
        let mut reference_ids = encode_sentence(&ref_lines[i], tgt_bpe, tgt_vocab);
        reference_ids.push(EOS);
        let constraints = match constraint_lines {
            Some(cons) => encode_constraints(&cons[i], tgt_bpe, tgt_vocab),
            None => ConstraintSet::empty(),
        };
        tuples.push(DatasetTuple {
            source_ids,
            reference_ids,
            constraints,
        });
    }
    Ok(tuples)
}
