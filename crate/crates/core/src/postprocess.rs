//! Score thresholding, per-class greedy NMS, and top-K selection.
//!
//! Thresholds are strict: a candidate must score strictly above the score
//! threshold, and a box is suppressed only when its overlap with a kept box
//! strictly exceeds the NMS threshold (ties at the threshold survive).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{jaccard, BBox};
use crate::heads::DetectionOutput;
use crate::model::{Model, NetworkPass, Variant};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            score_threshold: 0.01,
            nms_iou: 0.45,
            top_k: 200,
        }
    }
}

/// One scored box. `class` is the 0-based foreground class; background is
/// never emitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub anchor: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Keeps, per foreground class, every anchor scoring strictly above the
/// threshold.
pub fn filter_scores(det: &DetectionOutput, threshold: f64) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (anchor, scores) in det.scores.iter().enumerate() {
        for (cls, &score) in scores.iter().enumerate().skip(1) {
            if score > threshold {
                out.push(Candidate {
                    anchor,
                    class: cls - 1,
                    score,
                    bbox: det.boxes[anchor],
                });
            }
        }
    }
    out
}

/// Greedy suppression of one class's candidates. Candidates are sorted by
/// descending score (ties to the lower anchor index) and kept unless they
/// overlap an already-kept box by strictly more than `iou_threshold`.
pub fn nms(candidates: &[Candidate], iou_threshold: f64) -> Vec<Candidate> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .score
            .partial_cmp(&candidates[a].score)
            .expect("non-finite score in NMS")
            .then(candidates[a].anchor.cmp(&candidates[b].anchor))
    });
    let mut kept: Vec<Candidate> = Vec::new();
    for &i in &order {
        let c = &candidates[i];
        if kept.iter().all(|k| jaccard(&k.bbox, &c.bbox) <= iou_threshold) {
            kept.push(*c);
        }
    }
    kept
}

/// Highest-K candidates across classes by score; ties resolve to the lower
/// (class, anchor) pair so the ordering is stable.
pub fn top_k(mut candidates: Vec<Candidate>, k: usize) -> Vec<Candidate> {
    assert!(k >= 1, "top_k needs k >= 1");
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("non-finite score in top_k")
            .then(a.class.cmp(&b.class))
            .then(a.anchor.cmp(&b.anchor))
    });
    candidates.truncate(k);
    candidates
}

/// filter -> per-class NMS -> top-K.
pub fn postprocess(det: &DetectionOutput, num_classes: usize, cfg: &PostprocessConfig) -> Vec<Candidate> {
    let filtered = filter_scores(det, cfg.score_threshold);
    let mut kept = Vec::new();
    for cls in 0..num_classes {
        let class_cands: Vec<Candidate> =
            filtered.iter().filter(|c| c.class == cls).copied().collect();
        kept.extend(nms(&class_cands, cfg.nms_iou));
    }
    top_k(kept, cfg.top_k)
}

/// Pulls the per-anchor detection output out of a finished forward pass.
pub fn extract_detections(model: &Model, pass: &NetworkPass) -> DetectionOutput {
    let refined = if pass.ar.is_empty() {
        model.anchors().boxes().to_vec()
    } else {
        let ar: Vec<Tensor> = pass.ar.iter().map(|&id| pass.tape.value(id).clone()).collect();
        crate::heads::refined_anchor_boxes(
            &ar,
            model.anchors(),
            &model.config.coding,
            model
                .config
                .clip_refined_anchors
                .then_some(model.config.input_size as f64),
        )
    };
    let logits: Vec<Tensor> = pass.heads.iter().map(|h| pass.tape.value(h.conf).clone()).collect();
    let loc: Vec<Tensor> = pass.heads.iter().map(|h| pass.tape.value(h.loc).clone()).collect();
    crate::heads::decode_detections(
        &logits,
        &loc,
        &refined,
        model.anchors(),
        model.config.num_classes,
        &model.config.coding,
    )
}

/// One detection line of the JSON-lines interchange format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: usize,
    pub class: usize,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl DetectionRecord {
    pub fn from_candidate(frame: usize, c: &Candidate) -> Self {
        DetectionRecord {
            frame,
            class: c.class,
            score: c.score,
            cx: c.bbox.cx,
            cy: c.bbox.cy,
            w: c.bbox.w,
            h: c.bbox.h,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.w, self.h)
    }
}

pub fn write_detections_jsonl(path: &Path, records: &[DetectionRecord]) -> std::io::Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("detection serializes"));
        text.push('\n');
    }
    std::fs::write(path, text)
}

pub fn read_detections_jsonl(path: &Path) -> std::io::Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("detections line {}: {}", lineno + 1, e),
            )
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// End-to-end single-image inference for self-contained variants.
pub fn detect_image(model: &Model, image: &Tensor, cfg: &PostprocessConfig) -> Vec<Candidate> {
    assert_ne!(model.config.variant, Variant::Rd, "refinement detectors need a state");
    let pass = model.forward(image, false);
    let det = extract_detections(model, &pass);
    postprocess(&det, model.config.num_classes, cfg)
}
