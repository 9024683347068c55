//! VOC-style average precision at a fixed overlap threshold.
//!
//! Detections are pooled across images per class, sorted by descending
//! score, and matched greedily: a detection is a true positive when its
//! best overlap with a still-unmatched same-image ground truth strictly
//! exceeds the threshold. The average precision integrates the
//! monotone-interpolated precision over all achieved recall points.

use crate::boxes::{jaccard, BBox};

pub const EVAL_IOU: f64 = 0.5;

/// A detection attributed to an image (or video frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Average precision of one class.
///
/// `gts[i]` lists the class's ground-truth boxes of image `i`; detections
/// may reference any image index < `gts.len()`. Returns `None` when the
/// class has no ground truth anywhere (undefined AP).
pub fn average_precision(detections: &[ScoredBox], gts: &[Vec<BBox>], iou_threshold: f64) -> Option<f64> {
    let total_gts: usize = gts.iter().map(Vec::len).sum();
    if total_gts == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .expect("non-finite detection score")
            .then(a.cmp(&b))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = vec![false; order.len()];
    for (rank, &di) in order.iter().enumerate() {
        let det = &detections[di];
        let image_gts = &gts[det.image];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in image_gts.iter().enumerate() {
            if used[det.image][gi] {
                continue;
            }
            let iou = jaccard(&det.bbox, g);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            if iou > iou_threshold {
                used[det.image][gi] = true;
                tp[rank] = true;
            }
        }
    }

    // precision-recall points, then the right-to-left envelope
    let n = order.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut hits = 0usize;
    for (rank, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            hits += 1;
        }
        precisions.push(hits as f64 / (rank + 1) as f64);
        recalls.push(hits as f64 / total_gts as f64);
    }
    let mut envelope = precisions.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * envelope[i];
            prev_recall = recalls[i];
        }
    }
    Some(ap)
}

/// The recall/precision points of one class, for curve export.
pub fn pr_curve(detections: &[ScoredBox], gts: &[Vec<BBox>], iou_threshold: f64) -> Vec<(f64, f64)> {
    let total_gts: usize = gts.iter().map(Vec::len).sum();
    if total_gts == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut points = Vec::with_capacity(order.len());
    let mut hits = 0usize;
    for (rank, &di) in order.iter().enumerate() {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts[det.image].iter().enumerate() {
            if used[det.image][gi] {
                continue;
            }
            let iou = jaccard(&det.bbox, g);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            if iou > iou_threshold {
                used[det.image][gi] = true;
                hits += 1;
            }
        }
        points.push((hits as f64 / total_gts as f64, hits as f64 / (rank + 1) as f64));
    }
    points
}

/// Per-class APs and their mean over classes that have ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// AP per class; `None` for classes with no ground truth (excluded from
    /// the mean).
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    /// Classes that were skipped for having no ground truth.
    pub skipped: Vec<usize>,
}

/// Evaluates pooled detections against per-image ground truths.
///
/// `detections[c]` lists class `c`'s detections; `gts[i]` the (box, class)
/// pairs of image `i`. Panics when no class has ground truth.
pub fn mean_average_precision(
    detections: &[Vec<ScoredBox>],
    gts: &[Vec<(BBox, usize)>],
    num_classes: usize,
    iou_threshold: f64,
) -> EvalResult {
    let mut per_class = Vec::with_capacity(num_classes);
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    let mut counted = 0usize;
    for cls in 0..num_classes {
        let class_gts: Vec<Vec<BBox>> = gts
            .iter()
            .map(|img| img.iter().filter(|(_, c)| *c == cls).map(|(b, _)| *b).collect())
            .collect();
        let empty = Vec::new();
        let dets = detections.get(cls).unwrap_or(&empty);
        match average_precision(dets, &class_gts, iou_threshold) {
            Some(ap) => {
                sum += ap;
                counted += 1;
                per_class.push(Some(ap));
            }
            None => {
                skipped.push(cls);
                per_class.push(None);
            }
        }
    }
    assert!(counted > 0, "no class has any ground truth; mAP undefined");
    EvalResult {
        per_class,
        mean: sum / counted as f64,
        skipped,
    }
}
