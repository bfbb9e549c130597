//! Evaluation: case-sensitive corpus BLEU-4 and wall-clock decoding
//! runtime measurement.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::time::Instant;

const MAX_ORDER: usize = 4;

/// Corpus BLEU-4 with its ingredients.
#[derive(Debug, Clone)]
pub struct BleuReport {
    /// Percent, 0..=100.
    pub bleu: f64,
    /// Modified n-gram precisions for n = 1..=4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hypothesis_length: usize,
    pub reference_length: usize,
}

impl BleuReport {
    /// Machine-readable key=value block.
    pub fn to_kv(&self) -> String {
        let mut out = format!("bleu={:.2}\n", self.bleu);
        for (i, p) in self.precisions.iter().enumerate() {
            out.push_str(&format!("p{}={:.6}\n", i + 1, p));
        }
        out.push_str(&format!("bp={:.6}\n", self.brevity_penalty));
        out.push_str(&format!("hyp_len={}\n", self.hypothesis_length));
        out.push_str(&format!("ref_len={}\n", self.reference_length));
        out
    }

    pub fn to_text(&self) -> String {
        format!(
            "BLEU = {:.2}  ({:.3}/{:.3}/{:.3}/{:.3})  BP = {:.3}  hyp/ref = {}/{}",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.hypothesis_length,
            self.reference_length
        )
    }
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if words.len() >= n {
        for i in 0..=words.len() - n {
            *counts.entry(&words[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level case-sensitive BLEU-4: clipped modified n-gram precision,
/// geometric mean over n = 1..4, multiplicative brevity penalty. No
/// smoothing: a zero precision at any order zeroes the score.
pub fn bleu4(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::LineCountMismatch {
            left_name: "hypotheses".to_string(),
            left: hypotheses.len(),
            right_name: "references".to_string(),
            right: references.len(),
        });
    }
    let mut matched = [0u64; MAX_ORDER];
    let mut total = [0u64; MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &hyp_counts {
                total[n - 1] += count;
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
        }
    }

    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / total[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hypothesis_length: hyp_len,
        reference_length: ref_len,
    })
}

/// Wall-clock decoding speed: mean seconds per sentence over `repetitions`
/// timed passes after one untimed warmup pass. `decode` is called once per
/// sentence index.
pub fn measure_runtime(
    sentence_count: usize,
    repetitions: usize,
    mut decode: impl FnMut(usize) -> Result<()>,
) -> Result<f64> {
    if sentence_count == 0 {
        return Err(Error::EmptyInput("runtime test set"));
    }
    if repetitions < 3 {
        return Err(Error::Config(format!(
            "need at least 3 repetitions, got {repetitions}"
        )));
    }
    for i in 0..sentence_count {
        decode(i)?; // warmup
    }
    let start = Instant::now();
    for _ in 0..repetitions {
        for i in 0..sentence_count {
            decode(i)?;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(elapsed / (repetitions * sentence_count) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let corpus = vec![words("the cat sat on the mat"), words("a b c d")];
        let report = bleu4(&corpus, &corpus).unwrap();
        assert!((report.bleu - 100.0).abs() < 1e-9);
        assert!((report.brevity_penalty - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_zeroes_bleu_without_bigram_matches() {
        // "the the the the" vs "the cat": p1 clipped to 1/4, p2 = 0 -> BLEU 0.
        let report = bleu4(&[words("the the the the")], &[words("the cat")]).unwrap();
        assert!((report.precisions[0] - 0.25).abs() < 1e-12);
        assert_eq!(report.precisions[1], 0.0);
        assert_eq!(report.bleu, 0.0);
    }

    #[test]
    fn brevity_penalty_case() {
        // All precisions 1, hyp 4 vs ref 5: BLEU = 100 * exp(1 - 5/4).
        let report = bleu4(&[words("a b c d")], &[words("a b c d e")]).unwrap();
        for p in report.precisions {
            assert!((p - 1.0).abs() < 1e-12);
        }
        let expected = 100.0 * (1.0_f64 - 5.0 / 4.0).exp();
        assert!((report.bleu - expected).abs() < 1e-9);
        assert!((report.bleu - 77.88).abs() < 0.01);
    }

    #[test]
    fn case_sensitive() {
        let report = bleu4(&[words("The cat")], &[words("the cat")]).unwrap();
        assert!(report.precisions[0] < 1.0);
    }

    #[test]
    fn corpus_statistic_is_order_invariant() {
        let hyps = vec![words("a b c d e"), words("x y z w v"), words("p q r s t")];
        let refs = vec![words("a b c d f"), words("x y z w u"), words("p q r s t")];
        let a = bleu4(&hyps, &refs).unwrap();
        let hyps_r: Vec<_> = hyps.iter().rev().cloned().collect();
        let refs_r: Vec<_> = refs.iter().rev().cloned().collect();
        let b = bleu4(&hyps_r, &refs_r).unwrap();
        assert!((a.bleu - b.bleu).abs() < 1e-12);
    }

    #[test]
    fn single_token_change_strictly_decreases() {
        let reference = vec![words("the quick brown fox jumps over the lazy dog")];
        let perfect = bleu4(&reference, &reference).unwrap().bleu;
        for i in 0..reference[0].len() {
            let mut changed = reference.clone();
            changed[0][i] = "INTRUDER".to_string();
            let score = bleu4(&changed, &reference).unwrap().bleu;
            assert!(score < perfect, "position {i}: {score} !< {perfect}");
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(bleu4(&[words("a")], &[]).is_err());
    }

    #[test]
    fn kv_block_has_all_fields() {
        let report = bleu4(&[words("a b c d")], &[words("a b c d")]).unwrap();
        let kv = report.to_kv();
        for key in [
            "bleu=", "p1=", "p2=", "p3=", "p4=", "bp=", "hyp_len=", "ref_len=",
        ] {
            assert!(kv.contains(key), "missing {key} in {kv}");
        }
    }

    #[test]
    fn runtime_measurement_validates_and_repeats() {
        assert!(measure_runtime(0, 3, |_| Ok(())).is_err());
        assert!(measure_runtime(1, 2, |_| Ok(())).is_err());
        let a = measure_runtime(4, 3, |_| Ok(())).unwrap();
        assert!(a >= 0.0);
    }
}
