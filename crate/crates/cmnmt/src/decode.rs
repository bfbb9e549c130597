//! Decoders: standard beam search (soft constraints ride along in the
//! model's memory), the hard lexically-constrained baselines (grid beam
//! search and dynamic beam allocation), and a brute-force oracle used to
//! cross-check all of them on tiny search spaces.
//!
//! Coverage bookkeeping is at the subword level: a constraint counts as
//! covered once its full subword sequence has been generated contiguously
//! through explicit constraint extensions. Hard decoders return the best
//! finished hypothesis from the full-coverage bank; when none exists within
//! the length budget they force-append the remaining constraint tokens and
//! flag the output instead of failing.

use crate::cmem::{contains_contiguous, ConstraintMemory, ConstraintSet};
use crate::error::{Error, Result};
use crate::model::{DecoderState, EncodedSource, Model};
use std::cmp::Ordering;

/// A finished (or best-effort) decode with its bookkeeping.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Emitted tokens; ends with eos when `finished`.
    pub tokens: Vec<u32>,
    /// Sum of per-step log probabilities, in nats.
    pub log_prob: f64,
    pub finished: bool,
    /// True when the hard decoders had to force-append constraint tokens.
    pub forced: bool,
    /// Per-constraint coverage at the end of decoding.
    pub covered: Vec<bool>,
}

impl DecodeResult {
    pub fn covers_all(&self) -> bool {
        self.covered.iter().all(|&c| c)
    }
}

/// One live hypothesis.
#[derive(Debug, Clone)]
struct Item {
    tokens: Vec<u32>,
    log_prob: f64,
    state: DecoderState,
    covered: Vec<bool>,
    /// (constraint index, next token offset) while mid-constraint.
    in_progress: Option<(usize, usize)>,
    /// Total constraint subword tokens generated; the grid/bank index.
    tokens_covered: usize,
}

impl Item {
    fn fresh(model: &Model, c: &ConstraintSet) -> Item {
        Item {
            tokens: Vec::new(),
            log_prob: 0.0,
            state: model.begin_decode(),
            covered: c.iter().map(|cc| cc.tokens.is_empty()).collect(),
            in_progress: None,
            tokens_covered: 0,
        }
    }

    fn is_open(&self) -> bool {
        self.in_progress.is_none()
    }
}

/// Ranking used everywhere: higher log-prob first, then lexicographically
/// smaller token sequence (with the candidate token appended).
fn rank(
    a_lp: f64,
    a_tokens: &[u32],
    a_next: u32,
    b_lp: f64,
    b_tokens: &[u32],
    b_next: u32,
) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| {
        let a = a_tokens.iter().chain(std::iter::once(&a_next));
        let b = b_tokens.iter().chain(std::iter::once(&b_next));
        a.cmp(b)
    })
}

/// True when `a` beats `b`: higher log-prob, ties to the lexicographically
/// smaller sequence.
fn better_result(a: &DecodeResult, b: &DecodeResult) -> bool {
    match a.log_prob.total_cmp(&b.log_prob) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.tokens < b.tokens,
    }
}

struct Session<'m> {
    model: &'m Model,
    src: EncodedSource,
    memory: Option<ConstraintMemory>,
    constraints: ConstraintSet,
    eos: u32,
}

impl<'m> Session<'m> {
    fn new(model: &'m Model, x: &[u32], c: &ConstraintSet) -> Result<Self> {
        let src = model.encode_source(x)?;
        let memory = if model.config.uses_memory() {
            Some(model.encode_memory(c)?)
        } else {
            None
        };
        Ok(Session {
            model,
            src,
            memory,
            constraints: c.clone(),
            eos: crate::corpus::EOS,
        })
    }

    /// Advance one hypothesis by one step: returns the state that has
    /// consumed the hypothesis' last token and the next-token distribution.
    fn advance(&self, item: &Item) -> Result<(DecoderState, Vec<f64>)> {
        let mut state = item.state.clone();
        let prev = item.tokens.last().copied().unwrap_or(crate::corpus::BOS);
        let dist = self
            .model
            .decode_step(&mut state, &self.src, prev, self.memory.as_ref())?;
        Ok((state, dist))
    }

    fn result_from(&self, item: &Item, eos_lp: f64, forced: bool) -> DecodeResult {
        let mut tokens = item.tokens.clone();
        tokens.push(self.eos);
        DecodeResult {
            tokens,
            log_prob: item.log_prob + eos_lp,
            finished: true,
            forced,
            covered: item.covered.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    parent: usize,
    token: u32,
    log_prob: f64,
    /// Coverage transition, when this extension advances a constraint.
    advance: Option<(usize, usize)>, // (constraint, cursor after the step)
}

/// Constraint moves available to one hypothesis: closed hypotheses must
/// continue their constraint; open ones may start any uncovered constraint.
fn extension_moves(item: &Item, c: &ConstraintSet) -> Vec<(u32, Option<(usize, usize)>)> {
    let mut moves = Vec::new();
    match item.in_progress {
        Some((ci, pos)) => {
            let tokens = &c.get(ci).tokens;
            moves.push((tokens[pos], Some((ci, pos + 1))));
        }
        None => {
            for (ci, constraint) in c.iter().enumerate() {
                if !item.covered[ci] && !constraint.tokens.is_empty() {
                    moves.push((constraint.tokens[0], Some((ci, 1))));
                }
            }
        }
    }
    moves
}

fn apply_move(
    item: &Item,
    token: u32,
    lp: f64,
    state: &DecoderState,
    advance: Option<(usize, usize)>,
    c: &ConstraintSet,
) -> Item {
    let mut child = Item {
        tokens: item.tokens.clone(),
        log_prob: lp,
        state: state.clone(),
        covered: item.covered.clone(),
        in_progress: item.in_progress,
        tokens_covered: item.tokens_covered,
    };
    child.tokens.push(token);
    if let Some((ci, next)) = advance {
        child.tokens_covered += 1;
        if next == c.get(ci).tokens.len() {
            child.covered[ci] = true;
            child.in_progress = None;
        } else {
            child.in_progress = Some((ci, next));
        }
    }
    child
}

/// Standard length-wise beam search over P(y | x, c). Soft: no coverage
/// requirement is imposed; constraints only steer the model through its
/// memory. Returns the best finished hypothesis (ties break toward the
/// lexicographically smallest token sequence), or the best unfinished one
/// flagged `finished = false` when nothing terminates within `max_len`.
pub fn beam_search(
    model: &Model,
    x: &[u32],
    c: &ConstraintSet,
    beam_width: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be >= 1".to_string()));
    }
    let session = Session::new(model, x, c)?;
    let max_len = max_len.min(model.config.max_len);
    let mut items = vec![Item::fresh(model, &ConstraintSet::empty())];
    let mut best_finished: Option<DecodeResult> = None;

    for _ in 0..max_len {
        let mut advanced = Vec::with_capacity(items.len());
        let mut candidates: Vec<Candidate> = Vec::new();
        for (idx, item) in items.iter().enumerate() {
            let (state, dist) = session.advance(item)?;
            for (v, &p) in dist.iter().enumerate() {
                let lp = item.log_prob + p.ln();
                if lp.is_finite() {
                    candidates.push(Candidate {
                        parent: idx,
                        token: v as u32,
                        log_prob: lp,
                        advance: None,
                    });
                }
            }
            advanced.push(state);
        }
        candidates.sort_by(|a, b| {
            rank(
                a.log_prob,
                &items[a.parent].tokens,
                a.token,
                b.log_prob,
                &items[b.parent].tokens,
                b.token,
            )
        });
        let mut next = Vec::with_capacity(beam_width);
        for cand in &candidates {
            if cand.token == session.eos {
                let parent = &items[cand.parent];
                let result = session.result_from(parent, cand.log_prob - parent.log_prob, false);
                if best_finished
                    .as_ref()
                    .map_or(true, |b| better_result(&result, b))
                {
                    best_finished = Some(result);
                }
            } else if next.len() < beam_width {
                let parent = &items[cand.parent];
                next.push(apply_move(
                    parent,
                    cand.token,
                    cand.log_prob,
                    &advanced[cand.parent],
                    None,
                    &session.constraints,
                ));
            }
        }
        items = next;
        if items.is_empty() {
            break;
        }
        if let Some(best) = &best_finished {
            let top = items
                .iter()
                .map(|i| i.log_prob)
                .fold(f64::NEG_INFINITY, f64::max);
            if best.log_prob > top {
                break; // extensions only lose probability
            }
        }
    }

    Ok(match best_finished {
        Some(result) => result,
        None => {
            let best = items
                .iter()
                .min_by(|a, b| {
                    b.log_prob
                        .total_cmp(&a.log_prob)
                        .then_with(|| a.tokens.cmp(&b.tokens))
                })
                .expect("live beam cannot be empty when nothing finished");
            DecodeResult {
                tokens: best.tokens.clone(),
                log_prob: best.log_prob,
                finished: false,
                forced: false,
                covered: Vec::new(),
            }
        }
    })
}

/// Grid beam search: the beam is maintained along (length, covered
/// constraint tokens). Guarantees every constraint appears in the output.
pub fn grid_beam_search(
    model: &Model,
    x: &[u32],
    c: &ConstraintSet,
    beam_width: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    constrained_search(model, x, c, beam_width, max_len, SearchShape::Grid)
}

/// Dynamic beam allocation: one fixed-width beam per timestep, partitioned
/// into coverage banks; unfilled banks donate their slots. Same hard
/// guarantee as grid beam search at a per-step cost that does not grow
/// with the number of constraints.
pub fn dba_search(
    model: &Model,
    x: &[u32],
    c: &ConstraintSet,
    beam_width: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    constrained_search(model, x, c, beam_width, max_len, SearchShape::Dba)
}

enum SearchShape {
    Grid,
    Dba,
}

fn constrained_search(
    model: &Model,
    x: &[u32],
    c: &ConstraintSet,
    beam_width: usize,
    max_len: usize,
    shape: SearchShape,
) -> Result<DecodeResult> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be >= 1".to_string()));
    }
    let session = Session::new(model, x, c)?;
    let max_len = max_len.min(model.config.max_len);
    let total_tokens = c.token_count();
    let banks = total_tokens + 1;

    // Banks of live hypotheses, indexed by covered token count.
    let mut grid: Vec<Vec<Item>> = vec![Vec::new(); banks];
    grid[0].push(Item::fresh(model, c));
    let mut best_full: Option<DecodeResult> = None;

    for _ in 0..max_len {
        // Advance every live hypothesis once; collect candidates per bank.
        let mut advanced: Vec<Vec<DecoderState>> = Vec::with_capacity(banks);
        let mut bank_candidates: Vec<Vec<(usize, Candidate)>> = vec![Vec::new(); banks];
        for (k, bank) in grid.iter().enumerate() {
            let mut states = Vec::with_capacity(bank.len());
            for (idx, item) in bank.iter().enumerate() {
                let (state, dist) = session.advance(item)?;
                if item.is_open() {
                    for (v, &p) in dist.iter().enumerate() {
                        let lp = item.log_prob + p.ln();
                        if !lp.is_finite() {
                            continue;
                        }
                        if v as u32 == session.eos {
                            if item.tokens_covered == total_tokens {
                                let result = session.result_from(item, p.ln(), false);
                                if best_full
                                    .as_ref()
                                    .map_or(true, |b| better_result(&result, b))
                                {
                                    best_full = Some(result);
                                }
                            }
                        } else {
                            bank_candidates[k].push((
                                k,
                                Candidate {
                                    parent: idx,
                                    token: v as u32,
                                    log_prob: lp,
                                    advance: None,
                                },
                            ));
                        }
                    }
                }
                for (token, advance) in extension_moves(item, c) {
                    let lp = item.log_prob + dist[token as usize].ln();
                    if lp.is_finite() {
                        bank_candidates[k + 1].push((
                            k,
                            Candidate {
                                parent: idx,
                                token,
                                log_prob: lp,
                                advance,
                            },
                        ));
                    }
                }
                states.push(state);
            }
            advanced.push(states);
        }

        for cands in bank_candidates.iter_mut() {
            cands.sort_by(|(ak, a), (bk, b)| {
                rank(
                    a.log_prob,
                    &grid[*ak][a.parent].tokens,
                    a.token,
                    b.log_prob,
                    &grid[*bk][b.parent].tokens,
                    b.token,
                )
            });
        }

        let quota = match shape {
            // One full-width beam per grid cell.
            SearchShape::Grid => vec![beam_width; banks],
            SearchShape::Dba => dba_allocation(
                beam_width,
                &bank_candidates.iter().map(|c| c.len()).collect::<Vec<_>>(),
            ),
        };

        let mut next: Vec<Vec<Item>> = vec![Vec::new(); banks];
        for (k, candidates) in bank_candidates.iter().enumerate() {
            for (src_k, cand) in candidates.iter().take(quota[k]) {
                let parent = &grid[*src_k][cand.parent];
                next[k].push(apply_move(
                    parent,
                    cand.token,
                    cand.log_prob,
                    &advanced[*src_k][cand.parent],
                    cand.advance,
                    c,
                ));
            }
        }
        grid = next;

        if grid.iter().all(|bank| bank.is_empty()) {
            break;
        }
        if let Some(best) = &best_full {
            let top = grid
                .iter()
                .flatten()
                .map(|i| i.log_prob)
                .fold(f64::NEG_INFINITY, f64::max);
            if best.log_prob > top {
                break;
            }
        }
    }

    if let Some(result) = best_full {
        return Ok(result);
    }

    // Length budget exhausted without a covered, finished hypothesis:
    // force-append what is missing to the most-covered best hypothesis.
    let fallback = grid
        .iter()
        .flatten()
        .max_by(|a, b| {
            a.tokens_covered
                .cmp(&b.tokens_covered)
                .then_with(|| a.log_prob.total_cmp(&b.log_prob))
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .cloned()
        .unwrap_or_else(|| Item::fresh(model, c));
    force_complete(&session, fallback, c)
}

/// Slot allocation for one DBA step: every bank starts from
/// floor(width / banks); leftovers and slots of underfilled banks flow to
/// banks that still have candidates, highest coverage first.
fn dba_allocation(beam_width: usize, available: &[usize]) -> Vec<usize> {
    let banks = available.len();
    let base = beam_width / banks;
    let mut quota = vec![base; banks];
    let mut spare = beam_width - base * banks;
    loop {
        for k in 0..banks {
            if quota[k] > available[k] {
                spare += quota[k] - available[k];
                quota[k] = available[k];
            }
        }
        if spare == 0 {
            break;
        }
        let mut gave = false;
        for k in (0..banks).rev() {
            while spare > 0 && quota[k] < available[k] {
                quota[k] += 1;
                spare -= 1;
                gave = true;
            }
        }
        if !gave {
            break; // fewer candidates than slots everywhere
        }
    }
    quota
}

/// Complete a hypothesis by appending every missing constraint token (the
/// in-progress constraint first), scoring through the model while length
/// allows, then terminating with eos. Flagged as forced.
fn force_complete(session: &Session, mut item: Item, c: &ConstraintSet) -> Result<DecodeResult> {
    let mut pending: Vec<u32> = Vec::new();
    if let Some((ci, pos)) = item.in_progress {
        pending.extend_from_slice(&c.get(ci).tokens[pos..]);
        item.covered[ci] = true;
        item.in_progress = None;
    }
    for (ci, constraint) in c.iter().enumerate() {
        if !item.covered[ci] {
            pending.extend_from_slice(&constraint.tokens);
            item.covered[ci] = true;
        }
    }
    pending.push(session.eos);

    for token in pending {
        match session.advance(&item) {
            Ok((state, dist)) => {
                item.log_prob += dist[token as usize].ln();
                item.state = state;
                item.tokens.push(token);
            }
            Err(Error::LengthOverflow { .. }) => {
                // Out of model capacity; append unscored.
                item.tokens.push(token);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(DecodeResult {
        tokens: item.tokens,
        log_prob: item.log_prob,
        finished: true,
        forced: true,
        covered: item.covered,
    })
}

/// Brute-force global argmax: enumerates every eos-terminated sequence up
/// to `max_len`, scores it exactly, and applies an optional coverage
/// filter. The search space |V|^max_len must stay within a million
/// candidates.
pub fn exhaustive_oracle(
    model: &Model,
    x: &[u32],
    c: &ConstraintSet,
    coverage_filter: Option<&ConstraintSet>,
    max_len: usize,
) -> Result<DecodeResult> {
    let vocab = model.config.tgt_vocab as u64;
    let limit = 1_000_000u64;
    let mut space = 1u64;
    for _ in 0..max_len {
        space = space.saturating_mul(vocab);
        if space > limit {
            return Err(Error::SearchSpaceTooLarge {
                candidates: space,
                limit,
            });
        }
    }
    let max_len = max_len.min(model.config.max_len);
    let session = Session::new(model, x, c)?;

    let mut best: Option<DecodeResult> = None;
    let root = Item::fresh(model, &ConstraintSet::empty());
    let mut stack: Vec<Item> = vec![root];
    while let Some(item) = stack.pop() {
        let (state, dist) = session.advance(&item)?;
        // Terminate here with eos.
        let eos_lp = dist[session.eos as usize].ln();
        if eos_lp.is_finite() {
            let mut tokens = item.tokens.clone();
            tokens.push(session.eos);
            let passes = coverage_filter.map_or(true, |f| {
                f.iter().all(|cc| contains_contiguous(&tokens, &cc.tokens))
            });
            if passes {
                let result = DecodeResult {
                    log_prob: item.log_prob + eos_lp,
                    finished: true,
                    forced: false,
                    covered: coverage_filter
                        .map(|f| f.iter().map(|_| true).collect())
                        .unwrap_or_default(),
                    tokens,
                };
                if best.as_ref().map_or(true, |b| better_result(&result, b)) {
                    best = Some(result);
                }
            }
        }
        // Extend with every non-eos token.
        if item.tokens.len() + 1 < max_len {
            for v in (0..model.config.tgt_vocab as u32).rev() {
                if v == session.eos {
                    continue;
                }
                let lp = item.log_prob + dist[v as usize].ln();
                if !lp.is_finite() {
                    continue;
                }
                let mut child = Item {
                    tokens: item.tokens.clone(),
                    log_prob: lp,
                    state: state.clone(),
                    covered: Vec::new(),
                    in_progress: None,
                    tokens_covered: 0,
                };
                child.tokens.push(v);
                stack.push(child);
            }
        }
    }
    best.ok_or_else(|| Error::EmptyInput("oracle search space"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmem::Constraint;
    use crate::model::{ConstraintEncoderKind, IntegratorKind, ModelConfig};

    fn tiny_model(vocab: usize, seed: u64) -> Model {
        let config = ModelConfig {
            encoder_layers: 1,
            decoder_layers: 1,
            model_dim: 8,
            heads: 2,
            feed_forward_dim: 12,
            dropout: 0.0,
            src_vocab: 8,
            tgt_vocab: vocab,
            max_len: 12,
            integrator: IntegratorKind::None,
            constraint_encoder: ConstraintEncoderKind::None,
        };
        Model::init(config, seed).unwrap()
    }

    fn constraint(tokens: &[u32]) -> ConstraintSet {
        ConstraintSet::new(vec![Constraint {
            surface: "c".into(),
            tokens: tokens.to_vec(),
        }])
    }

    #[test]
    fn width_one_equals_greedy_chain() {
        let model = tiny_model(6, 3);
        let x = vec![4, 5];
        let empty = ConstraintSet::empty();
        let beam = beam_search(&model, &x, &empty, 1, 8).unwrap();

        // Greedy argmax chain by hand; argmax ties break to lowest id.
        let src = model.encode_source(&x).unwrap();
        let mut state = model.begin_decode();
        let mut prev = crate::corpus::BOS;
        let mut tokens = Vec::new();
        for _ in 0..8 {
            let dist = model.decode_step(&mut state, &src, prev, None).unwrap();
            let argmax = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(&a.0)))
                .unwrap()
                .0 as u32;
            tokens.push(argmax);
            if argmax == crate::corpus::EOS {
                break;
            }
            prev = argmax;
        }
        if *tokens.last().unwrap() == crate::corpus::EOS {
            assert_eq!(beam.tokens, tokens);
            assert!(beam.finished);
        } else {
            assert!(!beam.finished);
        }
    }

    #[test]
    fn saturated_beam_matches_oracle() {
        let empty = ConstraintSet::empty();
        for seed in 0..12 {
            let model = tiny_model(5, seed);
            let x = vec![4];
            let oracle = exhaustive_oracle(&model, &x, &empty, None, 4).unwrap();
            let beam = beam_search(&model, &x, &empty, 625, 4).unwrap();
            assert_eq!(beam.tokens, oracle.tokens, "seed {seed}");
            assert!((beam.log_prob - oracle.log_prob).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_matches_coverage_filtered_oracle() {
        for seed in 0..12 {
            let model = tiny_model(5, 100 + seed);
            let x = vec![4, 5];
            let c = constraint(&[4]);
            let oracle = exhaustive_oracle(&model, &x, &c, Some(&c), 4).unwrap();
            let grid = grid_beam_search(&model, &x, &c, 625, 4).unwrap();
            assert!(!grid.forced, "seed {seed}");
            assert_eq!(grid.tokens, oracle.tokens, "seed {seed}");
            assert!((grid.log_prob - oracle.log_prob).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_constraints_degenerate_to_beam_search() {
        let model = tiny_model(6, 17);
        let x = vec![4, 5, 6];
        let empty = ConstraintSet::empty();
        let plain = beam_search(&model, &x, &empty, 4, 10).unwrap();
        let grid = grid_beam_search(&model, &x, &empty, 4, 10).unwrap();
        let dba = dba_search(&model, &x, &empty, 4, 10).unwrap();
        assert_eq!(plain.tokens, grid.tokens);
        assert_eq!(plain.tokens, dba.tokens);
        assert!((plain.log_prob - grid.log_prob).abs() < 1e-12);
        assert!((plain.log_prob - dba.log_prob).abs() < 1e-12);
    }

    #[test]
    fn hard_decoders_always_cover() {
        for seed in 0..10 {
            let model = tiny_model(7, 200 + seed);
            let x = vec![4, 5];
            let c = ConstraintSet::new(vec![
                Constraint {
                    surface: "a".into(),
                    tokens: vec![4, 5],
                },
                Constraint {
                    surface: "b".into(),
                    tokens: vec![6],
                },
            ]);
            for search in [grid_beam_search, dba_search] {
                let out = search(&model, &x, &c, 4, 10).unwrap();
                assert!(out.covers_all(), "seed {seed}");
                for cc in c.iter() {
                    assert!(
                        contains_contiguous(&out.tokens, &cc.tokens),
                        "seed {seed}: {:?} missing {:?}",
                        out.tokens,
                        cc.tokens
                    );
                }
            }
        }
    }

    #[test]
    fn forced_fallback_is_flagged_and_covers() {
        // Length budget too small to place the constraints: the output must
        // still contain them, flagged as forced.
        let model = tiny_model(7, 5);
        let x = vec![4];
        let c = ConstraintSet::new(vec![
            Constraint {
                surface: "a".into(),
                tokens: vec![4, 5, 6],
            },
            Constraint {
                surface: "b".into(),
                tokens: vec![5, 5],
            },
        ]);
        let out = grid_beam_search(&model, &x, &c, 2, 2).unwrap();
        assert!(out.forced);
        assert!(out.covers_all());
        for cc in c.iter() {
            assert!(contains_contiguous(&out.tokens, &cc.tokens));
        }
    }

    #[test]
    fn oracle_coverage_filter_is_respected() {
        let model = tiny_model(5, 23);
        let c = constraint(&[4]);
        let out = exhaustive_oracle(&model, &[4], &ConstraintSet::empty(), Some(&c), 4).unwrap();
        assert!(contains_contiguous(&out.tokens, &[4]));
    }

    #[test]
    fn oracle_minimal_length_is_pure_eos() {
        let model = tiny_model(5, 29);
        let out = exhaustive_oracle(&model, &[4], &ConstraintSet::empty(), None, 1).unwrap();
        assert_eq!(out.tokens, vec![crate::corpus::EOS]);
    }

    #[test]
    fn oracle_rejects_huge_spaces() {
        let model = tiny_model(64, 31);
        assert!(matches!(
            exhaustive_oracle(&model, &[4], &ConstraintSet::empty(), None, 8),
            Err(Error::SearchSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn log_probs_never_increase_along_extensions() {
        let model = tiny_model(6, 37);
        let empty = ConstraintSet::empty();
        let out = beam_search(&model, &[4, 5], &empty, 3, 10).unwrap();
        // Recompute per-step log probs and check each is non-positive.
        let src = model.encode_source(&[4, 5]).unwrap();
        let mut state = model.begin_decode();
        let mut prev = crate::corpus::BOS;
        let mut acc = 0.0;
        for &tok in &out.tokens {
            let dist = model.decode_step(&mut state, &src, prev, None).unwrap();
            let step = dist[tok as usize].ln();
            assert!(step <= 0.0);
            acc += step;
            prev = tok;
        }
        assert!((acc - out.log_prob).abs() < 1e-9);
    }

    #[test]
    fn dba_allocation_donates_unused_slots() {
        assert_eq!(dba_allocation(8, &[10, 10, 10]), vec![2, 2, 4]);
        assert_eq!(dba_allocation(8, &[0, 10, 10]), vec![0, 2, 6]);
        assert_eq!(dba_allocation(8, &[1, 0, 2]), vec![1, 0, 2]);
        assert_eq!(dba_allocation(2, &[5, 5, 5]), vec![0, 0, 2]);
    }
}
