//! Anchor-to-ground-truth assignment and hard negative mining.
//!
//! Matching is two-phase: anchors overlapping some ground truth by more
//! than the threshold are matched to their best-overlap ground truth, then
//! every ground truth forces its single best-overlap anchor to itself so no
//! object goes unmatched. The forced phase processes ground truths in index
//! order; if two ground truths share the same best anchor the later one
//! wins (the earlier may then keep only threshold-matched anchors).
//!
//! Ties on equal overlap resolve to the lower index (anchor index in the
//! forced phase, ground-truth index in the threshold phase).

use crate::boxes::{jaccard, BBox};

pub const MATCH_IOU: f64 = 0.5;

/// Per-anchor assignment: the matched ground-truth index, or background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub matched_gt: Vec<Option<usize>>,
    /// Number of positive anchors.
    pub positives: usize,
}

impl MatchResult {
    pub fn is_positive(&self, anchor: usize) -> bool {
        self.matched_gt[anchor].is_some()
    }
}

/// Matches `anchors` against ground-truth boxes at the given overlap
/// threshold. With no ground truths every anchor is background.
pub fn match_anchors(anchors: &[BBox], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    assert!(!anchors.is_empty(), "matching requires at least one anchor");
    let mut matched_gt: Vec<Option<usize>> = vec![None; anchors.len()];
    if gts.is_empty() {
        return MatchResult { matched_gt, positives: 0 };
    }

    // threshold phase: per-anchor best ground truth, kept when above threshold
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (gi, g) in gts.iter().enumerate() {
            let iou = jaccard(a, g);
            if iou > best.1 {
                best = (gi, iou);
            }
        }
        if best.1 > iou_threshold {
            matched_gt[ai] = Some(best.0);
        }
    }

    // forced phase: every ground truth claims its best anchor
    for (gi, g) in gts.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (ai, a) in anchors.iter().enumerate() {
            let iou = jaccard(a, g);
            if iou > best.1 {
                best = (ai, iou);
            }
        }
        matched_gt[best.0] = Some(gi);
    }

    let positives = matched_gt.iter().filter(|m| m.is_some()).count();
    MatchResult { matched_gt, positives }
}

/// Selects the `delta * N` background anchors with the highest confidence
/// loss (ties to the lower index); takes all backgrounds when fewer exist.
/// Returns indices in ascending order. With no positives nothing is
/// selected.
pub fn hard_negative_mine(
    conf_loss_per_anchor: &[f64],
    matches: &MatchResult,
    delta: usize,
) -> Vec<usize> {
    assert!(delta >= 1, "negative-to-positive ratio must be >= 1");
    assert_eq!(conf_loss_per_anchor.len(), matches.matched_gt.len());
    let quota = delta * matches.positives;
    if quota == 0 {
        return Vec::new();
    }
    let mut negatives: Vec<usize> = (0..conf_loss_per_anchor.len())
        .filter(|&i| !matches.is_positive(i))
        .collect();
    negatives.sort_by(|&a, &b| {
        conf_loss_per_anchor[b]
            .partial_cmp(&conf_loss_per_anchor[a])
            .expect("non-finite confidence loss in mining")
            .then(a.cmp(&b))
    });
    negatives.truncate(quota);
    negatives.sort_unstable();
    negatives
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    #[test]
    fn no_ground_truth_means_all_background() {
        let anchors = vec![BBox::new(4.0, 4.0, 8.0, 8.0), BBox::new(12.0, 4.0, 8.0, 8.0)];
        let m = match_anchors(&anchors, &[], MATCH_IOU);
        assert_eq!(m.positives, 0);
        assert!(m.matched_gt.iter().all(Option::is_none));
    }

    #[test]
    fn exact_anchor_is_forced_positive() {
        // second anchor far from the gt, best-overlap rule still claims the first
        let anchors = vec![BBox::new(30.0, 30.0, 4.0, 4.0), BBox::new(4.0, 4.0, 8.0, 8.0)];
        let gts = vec![BBox::new(30.0, 30.0, 4.0, 4.0)];
        let m = match_anchors(&anchors, &gts, MATCH_IOU);
        assert_eq!(m.matched_gt[0], Some(0));
        assert_eq!(m.matched_gt[1], None);
        assert_eq!(m.positives, 1);

        // even a low-overlap best anchor is forced
        let gts = vec![BBox::new(40.0, 40.0, 3.0, 3.0)];
        let m = match_anchors(&anchors, &gts, MATCH_IOU);
        assert_eq!(m.positives, 1);
    }

    #[test]
    fn agrees_with_exhaustive_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n_anchors = rng.gen_range(1..=64);
            let n_gts = rng.gen_range(0..=6);
            let rand_box = |rng: &mut rand_chacha::ChaCha8Rng| {
                BBox::new(
                    rng.gen_range(0.0..64.0),
                    rng.gen_range(0.0..64.0),
                    rng.gen_range(2.0..24.0),
                    rng.gen_range(2.0..24.0),
                )
            };
            let anchors: Vec<BBox> = (0..n_anchors).map(|_| rand_box(&mut rng)).collect();
            let gts: Vec<BBox> = (0..n_gts).map(|_| rand_box(&mut rng)).collect();
            let got = match_anchors(&anchors, &gts, MATCH_IOU);
            let want = reference::match_naive(&anchors, &gts, MATCH_IOU);
            assert_eq!(got.matched_gt, want);
        }
    }

    #[test]
    fn mining_selects_top_quota() {
        let anchors: Vec<BBox> = (0..12).map(|i| BBox::new(i as f64 * 10.0, 4.0, 8.0, 8.0)).collect();
        let gts = vec![anchors[0], anchors[1]];
        let m = match_anchors(&anchors, &gts, MATCH_IOU);
        assert_eq!(m.positives, 2);
        let losses: Vec<f64> = (0..12).map(|i| (i as f64 * 7.3) % 5.0).collect();
        let picked = hard_negative_mine(&losses, &m, 3);
        assert_eq!(picked.len(), 6);
        let want = reference::hard_negatives_naive(
            &losses,
            &(0..12).map(|i| !m.is_positive(i)).collect::<Vec<_>>(),
            6,
        );
        assert_eq!(picked, want);
    }

    #[test]
    fn mining_with_no_positives_selects_nothing() {
        let anchors = vec![BBox::new(4.0, 4.0, 8.0, 8.0)];
        let m = match_anchors(&anchors, &[], MATCH_IOU);
        assert!(hard_negative_mine(&[3.0], &m, 3).is_empty());
    }

    #[test]
    fn mining_agrees_with_sort_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let losses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
            let positive_mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
            let matched_gt: Vec<Option<usize>> =
                positive_mask.iter().map(|&p| p.then_some(0)).collect();
            let positives = positive_mask.iter().filter(|&&p| p).count();
            let m = MatchResult { matched_gt, positives };
            let delta = rng.gen_range(1..4);
            let got = hard_negative_mine(&losses, &m, delta);
            let is_bg: Vec<bool> = positive_mask.iter().map(|&p| !p).collect();
            let want = reference::hard_negatives_naive(&losses, &is_bg, delta * positives);
            assert_eq!(got, want);
        }
    }
}
