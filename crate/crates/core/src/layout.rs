//! Token sequence layouts for conditioned next-scale generation.
//!
//! Two layouts are supported. The pre-fill layout places every conditioning
//! token (all subject scales, then text) ahead of the generated token blocks,
//! so conditions form a fixed bidirectional prefix and each target scale
//! attends to the whole prefix plus earlier target scales. The interleaved
//! layout alternates subject and target blocks scale by scale with strictly
//! block-causal attention.
//!
//! In both layouts the allowed key set of every query is a contiguous range
//! starting at position 0; the model exploits that, while audits and tests
//! work off the full boolean mask.

use alloc::vec;
use alloc::vec::Vec;

use crate::tokenizer::ScaleSchedule;

/// Role of one sequence position. Scale indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentLabel {
    Subject(usize),
    Text,
    Target(usize),
}

impl SegmentLabel {
    pub fn is_target(&self) -> bool {
        matches!(self, SegmentLabel::Target(_))
    }
}

/// One sequence position: its label and grid coordinates (text positions use
/// `row = 0`, `col = slot`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub label: SegmentLabel,
    pub row: usize,
    pub col: usize,
}

/// A contiguous run of positions sharing one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub label: SegmentLabel,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutKind {
    Prefill,
    Interleaved,
}

/// Flattened sequence plan: positions, attention mask, and loss mask.
#[derive(Debug, Clone)]
pub struct SequencePlan {
    pub layout_kind: LayoutKind,
    pub positions: Vec<Position>,
    pub blocks: Vec<Block>,
    /// Row-major query-by-key boolean matrix; true = may attend.
    pub attention_mask: Vec<bool>,
    /// True on positions that contribute to the training loss.
    pub loss_mask: Vec<bool>,
    /// 1-based subject scales present in the sequence.
    pub subject_scales: Vec<usize>,
}

impl SequencePlan {
    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.attention_mask[query * self.len() + key]
    }

    pub fn set_mask(&mut self, query: usize, key: usize, value: bool) {
        let n = self.len();
        self.attention_mask[query * n + key] = value;
    }

    /// Number of keys a query may attend to.
    pub fn support_size(&self, query: usize) -> usize {
        let n = self.len();
        self.attention_mask[query * n..(query + 1) * n]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// Target positions in block order; equals the flattened token order of
    /// the generated image.
    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&p| self.positions[p].label.is_target())
            .collect()
    }

    /// Blocks carrying a given label.
    pub fn block_of(&self, label: SegmentLabel) -> Option<Block> {
        self.blocks.iter().copied().find(|b| b.label == label)
    }
}

fn push_grid_block(
    positions: &mut Vec<Position>,
    blocks: &mut Vec<Block>,
    label: SegmentLabel,
    side: usize,
) {
    let start = positions.len();
    for row in 0..side {
        for col in 0..side {
            positions.push(Position { label, row, col });
        }
    }
    blocks.push(Block {
        label,
        start,
        len: side * side,
    });
}

fn push_text_block(positions: &mut Vec<Position>, blocks: &mut Vec<Block>, text_len: usize) {
    let start = positions.len();
    for slot in 0..text_len {
        positions.push(Position {
            label: SegmentLabel::Text,
            row: 0,
            col: slot,
        });
    }
    blocks.push(Block {
        label: SegmentLabel::Text,
        start,
        len: text_len,
    });
}

fn fill_range(mask: &mut [bool], n: usize, q: usize, upto: usize) {
    for k in 0..upto {
        mask[q * n + k] = true;
    }
}

fn finish(
    layout_kind: LayoutKind,
    positions: Vec<Position>,
    blocks: Vec<Block>,
    attention_mask: Vec<bool>,
    subject_scales: Vec<usize>,
) -> SequencePlan {
    let loss_mask = positions.iter().map(|p| p.label.is_target()).collect();
    SequencePlan {
        layout_kind,
        positions,
        blocks,
        attention_mask,
        loss_mask,
        subject_scales,
    }
}

/// Builds the pre-fill plan: segment order (SUBJECT(1..K), TEXT, TARGET(1..K)).
/// Subject and text positions attend bidirectionally among themselves; each
/// TARGET(k) attends to the full condition prefix, all earlier target scales,
/// and its own block.
pub fn build_prefill_plan(schedule: &ScaleSchedule, text_len: usize) -> SequencePlan {
    let all: Vec<usize> = (1..=schedule.num_scales()).collect();
    build_prefill_plan_subset(schedule, text_len, &all)
}

/// Pre-fill plan with only a subset of subject scales in the sequence
/// (1-based, ascending). Used by last-scale conditioning, where coarser
/// subject scales are omitted from the sequence entirely.
pub fn build_prefill_plan_subset(
    schedule: &ScaleSchedule,
    text_len: usize,
    subject_scales: &[usize],
) -> SequencePlan {
    assert!(text_len >= 1, "text length must be >= 1");
    assert!(!subject_scales.is_empty());
    assert!(subject_scales.windows(2).all(|w| w[0] < w[1]));
    assert!(*subject_scales.last().unwrap() <= schedule.num_scales());

    let mut positions = Vec::new();
    let mut blocks = Vec::new();
    for &k in subject_scales {
        push_grid_block(
            &mut positions,
            &mut blocks,
            SegmentLabel::Subject(k),
            schedule.side(k - 1),
        );
    }
    push_text_block(&mut positions, &mut blocks, text_len);
    let prefix_len = positions.len();
    for k in 1..=schedule.num_scales() {
        push_grid_block(
            &mut positions,
            &mut blocks,
            SegmentLabel::Target(k),
            schedule.side(k - 1),
        );
    }

    let n = positions.len();
    let mut mask = vec![false; n * n];
    for q in 0..prefix_len {
        fill_range(&mut mask, n, q, prefix_len);
    }
    let mut end = prefix_len;
    for k in 1..=schedule.num_scales() {
        let s = schedule.side(k - 1);
        let block_end = end + s * s;
        for q in end..block_end {
            fill_range(&mut mask, n, q, block_end);
        }
        end = block_end;
    }
    finish(
        LayoutKind::Prefill,
        positions,
        blocks,
        mask,
        subject_scales.to_vec(),
    )
}

/// Builds the interleaved plan: segment order (TEXT, S1, G1, S2, G2, ...).
/// Attention is block-causal: every block attends to all blocks up to and
/// including itself. Subject blocks are inputs only.
pub fn build_interleaved_plan(schedule: &ScaleSchedule, text_len: usize) -> SequencePlan {
    assert!(text_len >= 1, "text length must be >= 1");
    let mut positions = Vec::new();
    let mut blocks = Vec::new();
    push_text_block(&mut positions, &mut blocks, text_len);
    for k in 1..=schedule.num_scales() {
        let side = schedule.side(k - 1);
        push_grid_block(&mut positions, &mut blocks, SegmentLabel::Subject(k), side);
        push_grid_block(&mut positions, &mut blocks, SegmentLabel::Target(k), side);
    }

    let n = positions.len();
    let mut mask = vec![false; n * n];
    for b in &blocks {
        let block_end = b.start + b.len;
        for q in b.start..block_end {
            fill_range(&mut mask, n, q, block_end);
        }
    }
    let subject_scales = (1..=schedule.num_scales()).collect();
    finish(LayoutKind::Interleaved, positions, blocks, mask, subject_scales)
}

/// A query that can (transitively) read a later target scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub query: usize,
    pub query_scale: usize,
    pub reached: usize,
    pub reached_scale: usize,
}

/// Result of [`causality_audit`].
#[derive(Debug, Clone)]
pub struct AuditReport {
    pub passed: bool,
    pub first_violation: Option<Violation>,
    /// Direct attention support size per query position.
    pub support_sizes: Vec<usize>,
}

/// Verifies that no TARGET(k) query can reach a TARGET(j > k) key through any
/// chain of attention edges (information flows key -> query per layer, so
/// multi-layer leakage is the transitive closure of the mask).
pub fn causality_audit(plan: &SequencePlan) -> AuditReport {
    let n = plan.len();
    let words = n.div_ceil(64);
    let mut reach = vec![0u64; n * words];
    for q in 0..n {
        for k in 0..n {
            if plan.allows(q, k) {
                reach[q * words + k / 64] |= 1u64 << (k % 64);
            }
        }
    }
    // Transitive closure by fixpoint iteration.
    let mut changed = true;
    while changed {
        changed = false;
        for q in 0..n {
            let row_start = q * words;
            for k in 0..n {
                if reach[row_start + k / 64] >> (k % 64) & 1 == 1 && k != q {
                    for w in 0..words {
                        let merged = reach[row_start + w] | reach[k * words + w];
                        if merged != reach[row_start + w] {
                            reach[row_start + w] = merged;
                            changed = true;
                        }
                    }
                }
            }
        }
    }

    let mut first_violation = None;
    'outer: for q in 0..n {
        let qk = match plan.positions[q].label {
            SegmentLabel::Target(k) => k,
            _ => continue,
        };
        for k in 0..n {
            if reach[q * words + k / 64] >> (k % 64) & 1 == 1 {
                if let SegmentLabel::Target(jk) = plan.positions[k].label {
                    if jk > qk {
                        first_violation = Some(Violation {
                            query: q,
                            query_scale: qk,
                            reached: k,
                            reached_scale: jk,
                        });
                        break 'outer;
                    }
                }
            }
        }
    }
    let support_sizes = (0..n).map(|q| plan.support_size(q)).collect();
    AuditReport {
        passed: first_violation.is_none(),
        first_violation,
        support_sizes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched_12() -> ScaleSchedule {
        ScaleSchedule::new(&[1, 2]).unwrap()
    }

    #[test]
    fn prefill_segment_order_and_lengths() {
        let plan = build_prefill_plan(&sched_12(), 4);
        let lens: Vec<usize> = plan.blocks.iter().map(|b| b.len).collect();
        assert_eq!(lens, vec![1, 4, 4, 1, 4]);
        assert_eq!(plan.len(), 14);
        let labels: Vec<SegmentLabel> = plan.blocks.iter().map(|b| b.label).collect();
        assert_eq!(
            labels,
            vec![
                SegmentLabel::Subject(1),
                SegmentLabel::Subject(2),
                SegmentLabel::Text,
                SegmentLabel::Target(1),
                SegmentLabel::Target(2),
            ]
        );
    }

    #[test]
    fn prefill_attention_supports() {
        let plan = build_prefill_plan(&sched_12(), 4);
        // TARGET(2) queries see all 14 keys.
        let g2 = plan.block_of(SegmentLabel::Target(2)).unwrap();
        for q in g2.start..g2.start + g2.len {
            assert_eq!(plan.support_size(q), 14);
        }
        // TARGET(1) query sees keys 0..9 (prefix of 9 plus itself).
        let g1 = plan.block_of(SegmentLabel::Target(1)).unwrap();
        for k in 0..14 {
            assert_eq!(plan.allows(g1.start, k), k <= 9);
        }
        // Condition positions see exactly the condition prefix.
        for q in 0..9 {
            for k in 0..14 {
                assert_eq!(plan.allows(q, k), k < 9, "q={q} k={k}");
            }
        }
    }

    #[test]
    fn prefill_loss_mask_covers_targets_only() {
        let plan = build_prefill_plan(&sched_12(), 4);
        let expected: Vec<bool> = (0..14).map(|i| i >= 9).collect();
        assert_eq!(plan.loss_mask, expected);
    }

    #[test]
    fn interleaved_order_lengths_and_supports() {
        let plan = build_interleaved_plan(&sched_12(), 4);
        let lens: Vec<usize> = plan.blocks.iter().map(|b| b.len).collect();
        assert_eq!(lens, vec![4, 1, 1, 4, 4]);
        let labels: Vec<SegmentLabel> = plan.blocks.iter().map(|b| b.label).collect();
        assert_eq!(
            labels,
            vec![
                SegmentLabel::Text,
                SegmentLabel::Subject(1),
                SegmentLabel::Target(1),
                SegmentLabel::Subject(2),
                SegmentLabel::Target(2),
            ]
        );
        assert_eq!(plan.len(), 14);
        // TARGET(1) sees TXT + S1 + itself = keys 0..=5.
        let g1 = plan.block_of(SegmentLabel::Target(1)).unwrap();
        for k in 0..14 {
            assert_eq!(plan.allows(g1.start, k), k <= 5);
        }
        // Loss on the five target positions only.
        assert_eq!(plan.loss_mask.iter().filter(|&&b| b).count(), 5);
        let g2 = plan.block_of(SegmentLabel::Target(2)).unwrap();
        for q in g2.start..g2.start + g2.len {
            assert!(plan.loss_mask[q]);
        }
        assert!(plan.loss_mask[g1.start]);
    }

    #[test]
    fn both_layouts_have_equal_length() {
        for t in [1, 4, 7] {
            let sched = ScaleSchedule::new(&[1, 2, 4]).unwrap();
            let a = build_prefill_plan(&sched, t);
            let b = build_interleaved_plan(&sched, t);
            assert_eq!(a.len(), 2 * sched.total_tokens() + t);
            assert_eq!(a.len(), b.len());
        }
    }

    #[test]
    fn prefill_targets_see_all_subject_positions() {
        let sched = ScaleSchedule::new(&[1, 2, 4]).unwrap();
        let plan = build_prefill_plan(&sched, 4);
        for q in 0..plan.len() {
            if !plan.positions[q].label.is_target() {
                continue;
            }
            for k in 0..plan.len() {
                if matches!(plan.positions[k].label, SegmentLabel::Subject(_)) {
                    assert!(plan.allows(q, k));
                }
            }
        }
    }

    #[test]
    fn audit_passes_on_built_in_plans() {
        for sides in [&[1usize, 2][..], &[1, 2, 4][..]] {
            let sched = ScaleSchedule::new(sides).unwrap();
            assert!(causality_audit(&build_prefill_plan(&sched, 4)).passed);
            assert!(causality_audit(&build_interleaved_plan(&sched, 4)).passed);
        }
    }

    #[test]
    fn audit_detects_single_bit_fault() {
        let plan = build_prefill_plan(&sched_12(), 4);
        let g1 = plan.block_of(SegmentLabel::Target(1)).unwrap();
        let g2 = plan.block_of(SegmentLabel::Target(2)).unwrap();
        let mut bad = plan.clone();
        bad.set_mask(g1.start, g2.start + 2, true);
        let report = causality_audit(&bad);
        assert!(!report.passed);
        let v = report.first_violation.unwrap();
        assert_eq!(v.query_scale, 1);
        assert_eq!(v.reached_scale, 2);
    }

    #[test]
    fn audit_detects_transitive_leak() {
        // G1 -> TXT is legal on its own; TXT -> G2 creates a two-hop leak.
        let plan = build_prefill_plan(&sched_12(), 4);
        let txt = plan.block_of(SegmentLabel::Text).unwrap();
        let g2 = plan.block_of(SegmentLabel::Target(2)).unwrap();
        let mut bad = plan.clone();
        bad.set_mask(txt.start, g2.start, true);
        let report = causality_audit(&bad);
        assert!(!report.passed);
    }

    #[test]
    fn last_scale_subset_drops_coarse_subject_blocks() {
        let sched = ScaleSchedule::new(&[1, 2, 4]).unwrap();
        let plan = build_prefill_plan_subset(&sched, 4, &[3]);
        assert_eq!(plan.blocks[0].label, SegmentLabel::Subject(3));
        assert_eq!(plan.blocks[0].len, 16);
        assert_eq!(plan.len(), 16 + 4 + 21);
        assert!(causality_audit(&plan).passed);
    }
}
