//! Text preprocessing: BPE subword models, vocabularies, and dataset
//! assembly into (source, reference, constraints) tuples.

pub mod bpe;
pub mod dataset;
pub mod vocab;

pub use bpe::{apply_bpe, learn_bpe, undo_bpe, BpeModel, WORD_END};
pub use dataset::{assemble_dataset, encode_constraints, encode_sentence, DatasetTuple};
pub use vocab::{build_vocab, Vocabulary, BOS, EOS, PAD, SPECIALS, UNK};

use crate::error::{Error, Result};
use std::path::Path;

/// Read a UTF-8 text file into lines (without trailing newlines).
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Write lines joined by `\n`, with a trailing newline when non-empty.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
