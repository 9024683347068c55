//! The multi-task training objective: two localization losses and one
//! mined confidence loss.
//!
//!   L = L_loc_first / N_first + (L_loc_second + L_conf) / N_second
//!
//! The first-step localization matches original anchors and regresses the
//! anchor refinement toward them; the second step matches the refined
//! anchors and regresses the head offsets against them. Confidence is
//! cross-entropy over positives plus hard-mined negatives. A term with no
//! positives is defined as zero.
//!
//! Loss construction is split in two: [`plan_loss`] makes every
//! non-differentiable decision (matching, mining, target encoding) from
//! the current forward values, and [`apply_loss`] builds the purely
//! differentiable objective from that plan. Within a step the plan is a
//! constant: gradients reach the anchor refinement through its own
//! localization term and through the sampling offsets, not through the
//! targets — unless the differentiable-decode toggle routes the second
//! step's target through the tape.

use thiserror::Error;

use crate::boxes::{encode, BBox, BoxSet, OffsetCoding, ScaleLayout};
use crate::heads::{refined_anchor_boxes, HeadOutput};
use crate::matching::{hard_negative_mine, match_anchors, MATCH_IOU};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const HARD_NEGATIVE_RATIO: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// The normalized objective actually optimized.
    pub total: f64,
    /// Raw (unnormalized) first-step localization sum.
    pub loc_first: f64,
    /// Raw second-step localization sum.
    pub loc_second: f64,
    /// Raw confidence sum over positives and mined negatives.
    pub conf: f64,
    pub n_first: usize,
    pub n_second: usize,
    /// Number of mined negatives actually selected.
    pub mined: usize,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        LossBreakdown {
            total: 0.0,
            loc_first: 0.0,
            loc_second: 0.0,
            conf: 0.0,
            n_first: 0,
            n_second: 0,
            mined: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("non-finite loss: {0}")]
    NonFinite(String),
}

pub struct LossInputs<'a> {
    /// Per-scale anchor-offset tensors; empty for a single-step baseline.
    pub ar: &'a [TensorId],
    pub heads: &'a [HeadOutput],
    pub anchors: &'a BoxSet,
    /// Ground truths as (box, foreground class), classes 0-based.
    pub gts: &'a [(BBox, usize)],
    pub num_classes: usize,
    pub coding: OffsetCoding,
    /// Clip refined anchors to `[0, size]` before second-step matching.
    pub clip_refined: Option<f64>,
    /// Route the second-step target through the tape so gradients reach the
    /// anchor refinement via the refined-anchor decode.
    pub grad_through_decode: bool,
}

/// Second-step localization targets of one scale.
#[derive(Debug, Clone)]
enum SecondTargets {
    /// Pre-encoded against the (detached) refined anchors.
    Fixed(Vec<f64>),
    /// Built in-tape from the gathered anchor refinement.
    ThroughDecode { originals: Vec<BBox>, gts: Vec<BBox> },
}

/// Every non-differentiable decision of one image's loss, frozen for the
/// step.
#[derive(Debug, Clone)]
pub struct LossPlan {
    /// Per scale: first-step positive anchors and their encoded targets.
    first: Vec<(Vec<usize>, Vec<f64>)>,
    /// Per scale: second-step positive anchors and their targets.
    second: Vec<(Vec<usize>, SecondTargets)>,
    /// Per scale: anchors entering the confidence loss with target classes
    /// (0 = background).
    conf: Vec<(Vec<usize>, Vec<usize>)>,
    pub n_first: usize,
    pub n_second: usize,
    pub mined: usize,
}

impl LossPlan {
    pub fn contributes(&self) -> bool {
        self.n_first > 0 || self.n_second > 0
    }
}

/// Per-anchor background cross-entropy (the mining criterion), from logits.
pub fn background_conf_losses(
    tape: &Tape,
    heads: &[HeadOutput],
    anchors: &BoxSet,
    num_classes: usize,
) -> Vec<f64> {
    let classes = num_classes + 1;
    let mut out = Vec::with_capacity(anchors.len());
    for (l, lay) in anchors.layouts().iter().enumerate() {
        let t = tape.value(heads[l].conf);
        let plane = lay.h * lay.w;
        // anchor set order is (cell, slot), matching these loops
        for cell in 0..plane {
            for slot in 0..lay.anchors_per_cell {
                let mut mx = f64::NEG_INFINITY;
                for c in 0..classes {
                    mx = mx.max(t.data()[(slot * classes + c) * plane + cell]);
                }
                let mut denom = 0.0;
                for c in 0..classes {
                    denom += (t.data()[(slot * classes + c) * plane + cell] - mx).exp();
                }
                let l0 = t.data()[slot * classes * plane + cell];
                out.push(denom.ln() - (l0 - mx));
            }
        }
    }
    out
}

/// Matches, mines, and encodes targets from the current forward values.
pub fn plan_loss(tape: &Tape, inputs: &LossInputs) -> LossPlan {
    let gt_boxes: Vec<BBox> = inputs.gts.iter().map(|(b, _)| *b).collect();
    let layouts = inputs.anchors.layouts();

    let mut first = Vec::with_capacity(layouts.len());
    let mut n_first = 0usize;
    if !inputs.ar.is_empty() {
        let m = match_anchors(inputs.anchors.boxes(), &gt_boxes, MATCH_IOU);
        n_first = m.positives;
        for lay in layouts {
            let in_scale: Vec<usize> = (lay.start..lay.start + lay.count())
                .filter(|&ai| m.is_positive(ai))
                .collect();
            let mut targets = Vec::with_capacity(in_scale.len() * 4);
            for &ai in &in_scale {
                let gt = gt_boxes[m.matched_gt[ai].unwrap()];
                targets.extend_from_slice(&encode(&gt, inputs.anchors.get(ai), &inputs.coding));
            }
            first.push((in_scale, targets));
        }
    } else {
        first.extend(layouts.iter().map(|_| (Vec::new(), Vec::new())));
    }

    let refined: Vec<BBox> = if inputs.ar.is_empty() {
        inputs.anchors.boxes().to_vec()
    } else {
        let ar_values: Vec<Tensor> = inputs.ar.iter().map(|&id| tape.value(id).clone()).collect();
        refined_anchor_boxes(&ar_values, inputs.anchors, &inputs.coding, inputs.clip_refined)
    };
    let second_match = match_anchors(&refined, &gt_boxes, MATCH_IOU);
    let n_second = second_match.positives;

    let mut second = Vec::with_capacity(layouts.len());
    let mut conf = Vec::with_capacity(layouts.len());
    let mut mined_count = 0usize;
    if n_second > 0 {
        let bg_losses =
            background_conf_losses(tape, inputs.heads, inputs.anchors, inputs.num_classes);
        let mined = hard_negative_mine(&bg_losses, &second_match, HARD_NEGATIVE_RATIO);
        mined_count = mined.len();
        for lay in layouts {
            let in_scale: Vec<usize> = (lay.start..lay.start + lay.count())
                .filter(|&ai| second_match.is_positive(ai))
                .collect();
            let targets = if inputs.grad_through_decode && !inputs.ar.is_empty() {
                SecondTargets::ThroughDecode {
                    originals: in_scale.iter().map(|&ai| *inputs.anchors.get(ai)).collect(),
                    gts: in_scale
                        .iter()
                        .map(|&ai| gt_boxes[second_match.matched_gt[ai].unwrap()])
                        .collect(),
                }
            } else {
                let mut t = Vec::with_capacity(in_scale.len() * 4);
                for &ai in &in_scale {
                    let gt = gt_boxes[second_match.matched_gt[ai].unwrap()];
                    t.extend_from_slice(&encode(&gt, &refined[ai], &inputs.coding));
                }
                SecondTargets::Fixed(t)
            };
            second.push((in_scale, targets));

            let mut selected: Vec<(usize, usize)> = Vec::new();
            for ai in lay.start..lay.start + lay.count() {
                if let Some(gi) = second_match.matched_gt[ai] {
                    selected.push((ai, inputs.gts[gi].1 + 1));
                }
            }
            for &ai in &mined {
                if ai >= lay.start && ai < lay.start + lay.count() {
                    selected.push((ai, 0));
                }
            }
            selected.sort_unstable();
            conf.push((
                selected.iter().map(|&(a, _)| a).collect(),
                selected.iter().map(|&(_, c)| c).collect(),
            ));
        }
    } else {
        second.extend(layouts.iter().map(|_| (Vec::new(), SecondTargets::Fixed(Vec::new()))));
        conf.extend(layouts.iter().map(|_| (Vec::new(), Vec::new())));
    }

    LossPlan {
        first,
        second,
        conf,
        n_first,
        n_second,
        mined: mined_count,
    }
}

fn gather_anchor_offsets(
    tape: &mut Tape,
    tensor: TensorId,
    lay: &ScaleLayout,
    anchor_indices: &[usize],
) -> TensorId {
    let plane = lay.h * lay.w;
    let a = lay.anchors_per_cell;
    let mut idx = Vec::with_capacity(anchor_indices.len() * 4);
    for &ai in anchor_indices {
        let rel = ai - lay.start;
        let (cell, slot) = (rel / a, rel % a);
        for c in 0..4 {
            idx.push((slot * 4 + c) * plane + cell);
        }
    }
    tape.gather(tensor, idx)
}

fn gather_logit_rows(
    tape: &mut Tape,
    tensor: TensorId,
    lay: &ScaleLayout,
    classes: usize,
    anchor_indices: &[usize],
) -> TensorId {
    let plane = lay.h * lay.w;
    let a = lay.anchors_per_cell;
    let mut idx = Vec::with_capacity(anchor_indices.len() * classes);
    for &ai in anchor_indices {
        let rel = ai - lay.start;
        let (cell, slot) = (rel / a, rel % a);
        for c in 0..classes {
            idx.push((slot * classes + c) * plane + cell);
        }
    }
    let flat = tape.gather(tensor, idx);
    tape.reshape(flat, vec![anchor_indices.len(), classes])
}

fn add_opt(tape: &mut Tape, acc: Option<TensorId>, term: TensorId) -> Option<TensorId> {
    Some(match acc {
        None => term,
        Some(a) => tape.add(a, term),
    })
}

/// Builds the differentiable objective for a frozen plan. Returns the
/// scalar loss node (absent when the plan contributes nothing) and the
/// value breakdown.
pub fn apply_loss(
    tape: &mut Tape,
    inputs: &LossInputs,
    plan: &LossPlan,
) -> Result<(Option<TensorId>, LossBreakdown), LossError> {
    let layouts = inputs.anchors.layouts().to_vec();
    let classes = inputs.num_classes + 1;

    let mut loc_first_id = None;
    for (l, (in_scale, targets)) in plan.first.iter().enumerate() {
        if in_scale.is_empty() {
            continue;
        }
        let preds = gather_anchor_offsets(tape, inputs.ar[l], &layouts[l], in_scale);
        let t = tape.leaf(Tensor::from_vec(vec![targets.len()], targets.clone()), false);
        let d = tape.sub(preds, t);
        let s = tape.smooth_l1(d);
        let term = tape.sum(s);
        loc_first_id = add_opt(tape, loc_first_id, term);
    }

    let mut loc_second_id = None;
    for (l, (in_scale, targets)) in plan.second.iter().enumerate() {
        if in_scale.is_empty() {
            continue;
        }
        let preds = gather_anchor_offsets(tape, inputs.heads[l].loc, &layouts[l], in_scale);
        let diff = match targets {
            SecondTargets::Fixed(t) => {
                let tid = tape.leaf(Tensor::from_vec(vec![t.len()], t.clone()), false);
                tape.sub(preds, tid)
            }
            SecondTargets::ThroughDecode { originals, gts } => {
                let ar_rows = gather_anchor_offsets(tape, inputs.ar[l], &layouts[l], in_scale);
                let k = in_scale.len();
                let ar_rows = tape.reshape(ar_rows, vec![k, 4]);
                let refined_rows = tape.decode_rows(ar_rows, originals.clone(), inputs.coding);
                let target_rows = tape.encode_rows(refined_rows, gts.clone(), inputs.coding);
                let targets_flat = tape.reshape(target_rows, vec![k * 4]);
                tape.sub(preds, targets_flat)
            }
        };
        let s = tape.smooth_l1(diff);
        let term = tape.sum(s);
        loc_second_id = add_opt(tape, loc_second_id, term);
    }

    let mut conf_id = None;
    for (l, (anchor_ids, target_classes)) in plan.conf.iter().enumerate() {
        if anchor_ids.is_empty() {
            continue;
        }
        let rows = gather_logit_rows(tape, inputs.heads[l].conf, &layouts[l], classes, anchor_ids);
        let term = tape.cross_entropy(rows, target_classes.clone());
        conf_id = add_opt(tape, conf_id, term);
    }

    let mut total_id: Option<TensorId> = None;
    if let Some(first) = loc_first_id {
        let t = tape.scale(first, 1.0 / plan.n_first as f64);
        total_id = add_opt(tape, total_id, t);
    }
    if plan.n_second > 0 {
        let second_raw = match (loc_second_id, conf_id) {
            (Some(l), Some(c)) => tape.add(l, c),
            (Some(l), None) => l,
            (None, Some(c)) => c,
            (None, None) => unreachable!("positives imply both second-step terms"),
        };
        let t = tape.scale(second_raw, 1.0 / plan.n_second as f64);
        total_id = add_opt(tape, total_id, t);
    }

    let breakdown = LossBreakdown {
        total: total_id.map_or(0.0, |id| tape.value(id).item()),
        loc_first: loc_first_id.map_or(0.0, |id| tape.value(id).item()),
        loc_second: loc_second_id.map_or(0.0, |id| tape.value(id).item()),
        conf: conf_id.map_or(0.0, |id| tape.value(id).item()),
        n_first: plan.n_first,
        n_second: plan.n_second,
        mined: plan.mined,
    };
    if !breakdown.total.is_finite() {
        return Err(LossError::NonFinite(format!(
            "total={} loc_first={} loc_second={} conf={} (N_first={}, N_second={})",
            breakdown.total,
            breakdown.loc_first,
            breakdown.loc_second,
            breakdown.conf,
            plan.n_first,
            plan.n_second
        )));
    }
    Ok((total_id, breakdown))
}

/// Plans and applies in one call (the normal training path).
pub fn compute_loss(
    tape: &mut Tape,
    inputs: &LossInputs,
) -> Result<(Option<TensorId>, LossBreakdown), LossError> {
    let plan = plan_loss(tape, inputs);
    apply_loss(tape, inputs, &plan)
}
