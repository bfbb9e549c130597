//! Constraint memories: lexical constraints encoded as a matrix of
//! continuous slots that the decoder can consult, plus the three ways of
//! folding that matrix into decoding (gated combination, copy mixture,
//! self-attention over the concatenated history).
//!
//! A memory always carries one extra learned *sentinel* slot. Attention over
//! an empty memory would be degenerate, and the sentinel doubles as the
//! "no constraint applies here" target for the gates, so every code path
//! works for an empty constraint set.

use crate::model::ConstraintEncoderKind;
use crate::tensor::{Graph, NodeId, Tensor};

/// One lexical constraint: a surface word and its subword token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraint {
    pub surface: String,
    pub tokens: Vec<u32>,
}

/// Ordered sequence of constraints for one sentence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConstraintSet {
    constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Self {
        ConstraintSet { constraints }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn get(&self, i: usize) -> &Constraint {
        &self.constraints[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Constraint> {
        self.constraints.iter()
    }

    /// Per-constraint satisfaction flags against a decoded prefix: a
    /// constraint is satisfied once its full subword sequence appears
    /// contiguously in the prefix.
    pub fn satisfied(&self, prefix: &[u32]) -> Vec<bool> {
        self.constraints
            .iter()
            .map(|c| contains_contiguous(prefix, &c.tokens))
            .collect()
    }

    /// Total number of subword tokens over all constraints.
    pub fn token_count(&self) -> usize {
        self.constraints.iter().map(|c| c.tokens.len()).sum()
    }
}

/// True when `needle` occurs as a contiguous run inside `haystack`.
pub fn contains_contiguous(haystack: &[u32], needle: &[u32]) -> bool {
    if needle.is_empty() {
        return true;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Slot bookkeeping for a memory: one slot per constraint subword token,
/// in constraint order, followed by the sentinel.
#[derive(Debug, Clone, Default)]
pub struct MemoryLayout {
    /// Subword token id held by each non-sentinel slot.
    pub slot_token: Vec<u32>,
    /// Constraint index owning each non-sentinel slot.
    pub slot_constraint: Vec<usize>,
}

impl MemoryLayout {
    pub fn from_set(c: &ConstraintSet) -> Self {
        let mut slot_token = Vec::with_capacity(c.token_count());
        let mut slot_constraint = Vec::with_capacity(c.token_count());
        for (i, constraint) in c.iter().enumerate() {
            for &tok in &constraint.tokens {
                slot_token.push(tok);
                slot_constraint.push(i);
            }
        }
        MemoryLayout {
            slot_token,
            slot_constraint,
        }
    }

    /// Number of non-sentinel slots.
    pub fn slots(&self) -> usize {
        self.slot_token.len()
    }

    /// Total rows including the sentinel.
    pub fn rows(&self) -> usize {
        self.slot_token.len() + 1
    }

    /// Slot activity for one prefix: shallow memories mask out every slot of
    /// a constraint already satisfied by the prefix; deep memories never
    /// re-mask. The sentinel slot is always active.
    pub fn active_for_prefix(
        &self,
        kind: ConstraintEncoderKind,
        set: &ConstraintSet,
        prefix: &[u32],
    ) -> Vec<bool> {
        let mut active = vec![true; self.rows()];
        if kind == ConstraintEncoderKind::Shallow {
            let satisfied = set.satisfied(prefix);
            for (slot, &ci) in self.slot_constraint.iter().enumerate() {
                if satisfied[ci] {
                    active[slot] = false;
                }
            }
        }
        active
    }
}

/// An encoded constraint memory: slot rows plus activity bookkeeping,
/// detached from any graph. Decoding sessions share one of these read-only;
/// per-step activity masks are recomputed rather than mutated in place.
#[derive(Debug, Clone)]
pub struct ConstraintMemory {
    pub layout: MemoryLayout,
    pub kind: ConstraintEncoderKind,
    pub set: ConstraintSet,
    /// (slots + 1) x d row matrix; the last row is the sentinel.
    pub rows: Tensor,
}

impl ConstraintMemory {
    pub fn active_for_prefix(&self, prefix: &[u32]) -> Vec<bool> {
        self.layout.active_for_prefix(self.kind, &self.set, prefix)
    }
}

/// Projections of one single-head attention readout over the memory.
pub struct AttnReadoutNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
}

/// Gate integrator with memory keys/values already projected. Decoding
/// sessions project the (fixed) memory once and reuse it every step.
pub struct GateProjection {
    pub f1_wq: NodeId,
    pub f1_k: NodeId,
    pub f1_v: NodeId,
    pub f2_wq: NodeId,
    pub f2_k: NodeId,
    pub f2_v: NodeId,
    pub f2_bias: NodeId,
}

/// Copy integrator with memory keys/values already projected.
pub struct CopyProjection {
    pub score_wq: NodeId,
    pub score_k: NodeId,
    pub f2_wq: NodeId,
    pub f2_k: NodeId,
    pub f2_v: NodeId,
    pub gate_w: NodeId,
    pub gate_b: NodeId,
}

/// Single-head scaled dot-product readout over projected memory rows.
/// `active` is row-major (h rows x memory rows).
fn readout_projected(
    g: &mut Graph,
    h: NodeId,
    wq: NodeId,
    k: NodeId,
    v: NodeId,
    active: &[bool],
) -> NodeId {
    let d = g.cols(h);
    let q = g.matmul(h, wq);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let alpha = g.softmax_rows(scores, Some(active.to_vec()));
    g.matmul(alpha, v)
}

/// Single-head scaled dot-product readout of the memory for each row of
/// `h`, projecting keys and values on the fly.
pub fn memory_attention_readout(
    g: &mut Graph,
    h: NodeId,
    mem_rows: NodeId,
    active: &[bool],
    w: &AttnReadoutNodes,
) -> NodeId {
    let k = g.matmul(mem_rows, w.wk);
    let v = g.matmul(mem_rows, w.wv);
    readout_projected(g, h, w.wq, k, v, active)
}

/// Gated combination: h-hat = g * h + (1 - g) * f1(h, E(c)) with an
/// elementwise gate g = sigmoid(f2(h, E(c)) + bias).
pub fn integrate_gate_projected(
    g: &mut Graph,
    h: NodeId,
    proj: &GateProjection,
    active: &[bool],
) -> NodeId {
    let f1r = readout_projected(g, h, proj.f1_wq, proj.f1_k, proj.f1_v, active);
    let f2r = readout_projected(g, h, proj.f2_wq, proj.f2_k, proj.f2_v, active);
    let f2r = g.add_row(f2r, proj.f2_bias);
    let gate = g.sigmoid(f2r);
    let gh = g.mul(gate, h);
    let gf = g.mul(gate, f1r);
    let rest = g.sub(f1r, gf);
    g.add(gh, rest)
}

/// Copy integrator: mixes the generation distribution with a constrained
/// softmax over the constraint subword tokens, under a scalar gate per row.
///
/// The constrained distribution lives only on the constraint tokens: it is
/// exactly zero everywhere else in the vocabulary. Rows whose non-sentinel
/// slots are all masked fall back to pure generation (gate forced to 1).
pub fn integrate_copy_projected(
    g: &mut Graph,
    p_gen: NodeId,
    h: NodeId,
    layout: &MemoryLayout,
    active: &[bool],
    proj: &CopyProjection,
    vocab: usize,
) -> NodeId {
    let t_rows = g.rows(h);
    let d = g.cols(h);
    let s = layout.slots();
    if s == 0 {
        return p_gen;
    }

    // Scalar gate from an attention readout over all active slots.
    let gate_read = readout_projected(g, h, proj.f2_wq, proj.f2_k, proj.f2_v, active);
    let gate_logit = g.matmul(gate_read, proj.gate_w);
    let gate_logit = g.add_row(gate_logit, proj.gate_b);
    let gate = g.sigmoid(gate_logit); // [T,1]

    let mut row_has_slot = vec![false; t_rows];
    for i in 0..t_rows {
        for j in 0..s {
            if active[i * (s + 1) + j] {
                row_has_slot[i] = true;
                break;
            }
        }
    }
    // Rows without any active constraint slot keep the generator untouched.
    let keep: Vec<f64> = row_has_slot.iter().map(|&b| f64::from(b as u8)).collect();
    let keep_node = g.constant(t_rows, 1, keep.clone());
    let fill_node = g.constant(t_rows, 1, keep.iter().map(|k| 1.0 - k).collect());
    let gate_masked = g.mul(gate, keep_node);
    let gate_eff = g.add(gate_masked, fill_node);

    // Constrained softmax over active non-sentinel slots. Empty rows park
    // the softmax on the sentinel; the slice below drops that column, which
    // zeroes their constrained distribution.
    let mut score_mask = vec![false; t_rows * (s + 1)];
    for i in 0..t_rows {
        if row_has_slot[i] {
            for j in 0..s {
                score_mask[i * (s + 1) + j] = active[i * (s + 1) + j];
            }
        } else {
            score_mask[i * (s + 1) + s] = true;
        }
    }
    let q = g.matmul(h, proj.score_wq);
    let kt = g.transpose(proj.score_k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let alpha = g.softmax_rows(scores, Some(score_mask));
    let slot_probs = g.slice_cols(alpha, 0, s);
    let slot_cols: Vec<usize> = layout.slot_token.iter().map(|&t| t as usize).collect();
    let p_c = g.scatter_add_cols(slot_probs, &slot_cols, vocab);

    let ones = g.constant(t_rows, 1, vec![1.0; t_rows]);
    let inv_gate = g.sub(ones, gate_eff);
    let p_gen_part = g.mul_col(p_gen, gate_eff);
    let p_c_part = g.mul_col(p_c, inv_gate);
    g.add(p_gen_part, p_c_part)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(words: &[(&str, &[u32])]) -> ConstraintSet {
        ConstraintSet::new(
            words
                .iter()
                .map(|(w, t)| Constraint {
                    surface: w.to_string(),
                    tokens: t.to_vec(),
                })
                .collect(),
        )
    }

    #[test]
    fn contiguous_subsequence() {
        assert!(contains_contiguous(&[1, 2, 3, 4], &[2, 3]));
        assert!(!contains_contiguous(&[1, 2, 3, 4], &[3, 2]));
        assert!(!contains_contiguous(&[1, 3], &[1, 2]));
        assert!(contains_contiguous(&[1], &[]));
    }

    #[test]
    fn satisfied_needs_full_subword_run() {
        let c = set(&[("ab", &[5, 6]), ("x", &[9])]);
        assert_eq!(c.satisfied(&[5, 7, 9]), vec![false, true]);
        assert_eq!(c.satisfied(&[5, 6]), vec![true, false]);
        assert_eq!(c.satisfied(&[]), vec![false, false]);
    }

    #[test]
    fn layout_orders_slots_by_constraint() {
        let c = set(&[("ab", &[5, 6]), ("x", &[9])]);
        let layout = MemoryLayout::from_set(&c);
        assert_eq!(layout.slot_token, vec![5, 6, 9]);
        assert_eq!(layout.slot_constraint, vec![0, 0, 1]);
        assert_eq!(layout.rows(), 4);
    }

    #[test]
    fn shallow_masking_follows_prefix_and_deep_never_masks() {
        let c = set(&[("ab", &[5, 6]), ("x", &[9])]);
        let layout = MemoryLayout::from_set(&c);
        let shallow = layout.active_for_prefix(ConstraintEncoderKind::Shallow, &c, &[1, 5, 6, 2]);
        assert_eq!(shallow, vec![false, false, true, true]);
        let deep = layout.active_for_prefix(ConstraintEncoderKind::Deep, &c, &[1, 5, 6, 2]);
        assert_eq!(deep, vec![true, true, true, true]);
    }
}
