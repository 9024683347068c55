//! Slow, obviously-correct reference implementations used by the validation
//! suite.
//!
//! Everything here is written directly from the defining formulas with
//! nested loops and no shared code with the production kernels, so the two
//! paths can be checked against each other. Nothing in this module is used
//! by the detector itself.

use crate::boxes::BBox;
use crate::tensor::Tensor;

/// Plain cross-correlation, six nested loops.
pub fn conv2d_naive(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor {
    let (n, ci, h, w) = input.dims4();
    let (co, _, kh, kw) = weight.dims4();
    let oh = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros(vec![n, co, oh, ow]);
    for bn in 0..n {
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[oc];
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy as i64 * stride as i64 - padding as i64
                                    + ky as i64 * dilation as i64;
                                let ix = ox as i64 * stride as i64 - padding as i64
                                    + kx as i64 * dilation as i64;
                                if iy >= 0 && ix >= 0 && iy < h as i64 && ix < w as i64 {
                                    acc += weight.at4(oc, ic, ky, kx)
                                        * input.at4(bn, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    let idx = out.index4(bn, oc, oy, ox);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

fn read_or_zero(input: &Tensor, n: usize, c: usize, y: i64, x: i64) -> f64 {
    let (_, _, h, w) = input.dims4();
    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
        0.0
    } else {
        input.at4(n, c, y as usize, x as usize)
    }
}

/// Bilinear read written from the four-corner formula.
pub fn bilinear_naive(input: &Tensor, n: usize, c: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor() as i64;
    let x0 = x.floor() as i64;
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    read_or_zero(input, n, c, y0, x0) * (1.0 - fy) * (1.0 - fx)
        + read_or_zero(input, n, c, y0, x0 + 1) * (1.0 - fy) * fx
        + read_or_zero(input, n, c, y0 + 1, x0) * fy * (1.0 - fx)
        + read_or_zero(input, n, c, y0 + 1, x0 + 1) * fy * fx
}

/// Deformable convolution, one bilinear read per tap.
pub fn deform_conv2d_naive(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    offsets: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor {
    let (n, ci, _, _) = input.dims4();
    let (co, _, kh, kw) = weight.dims4();
    let (_, _, oh, ow) = offsets.dims4();
    let mut out = Tensor::zeros(vec![n, co, oh, ow]);
    for bn in 0..n {
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[oc];
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let t = ky * kw + kx;
                                let dy = offsets.at4(bn, 2 * t, oy, ox);
                                let dx = offsets.at4(bn, 2 * t + 1, oy, ox);
                                let sy = (oy * stride + ky * dilation) as f64 - padding as f64 + dy;
                                let sx = (ox * stride + kx * dilation) as f64 - padding as f64 + dx;
                                acc += weight.at4(oc, ic, ky, kx)
                                    * bilinear_naive(input, bn, ic, sy, sx);
                            }
                        }
                    }
                    let idx = out.index4(bn, oc, oy, ox);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

/// Greedy per-class NMS by repeated scan: keep the best-scoring survivor,
/// drop everything overlapping it more than the threshold, repeat.
///
/// `candidates` are (score, box, tie_break_index); returns kept positions in
/// the input slice, in keep order.
pub fn nms_naive(candidates: &[(f64, BBox, usize)], iou_threshold: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; candidates.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for (i, c) in candidates.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (bs, _, bidx) = candidates[b];
                    if c.0 > bs || (c.0 == bs && c.2 < bidx) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for (i, c) in candidates.iter().enumerate() {
            if alive[i] && crate::boxes::jaccard(&c.1, &candidates[b].1) > iou_threshold {
                alive[i] = false;
            }
        }
    }
    kept
}

/// Exhaustive two-phase matcher: per-anchor best ground truth above the
/// overlap threshold, then each ground truth forces its best-overlap anchor
/// (processed in ground-truth order).
///
/// Returns per-anchor `Option<gt index>`.
pub fn match_naive(anchors: &[BBox], gts: &[BBox], threshold: f64) -> Vec<Option<usize>> {
    let mut assigned: Vec<Option<usize>> = vec![None; anchors.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let mut best_gt = None;
        let mut best_iou = f64::NEG_INFINITY;
        for (gi, g) in gts.iter().enumerate() {
            let iou = crate::boxes::jaccard(a, g);
            if iou > best_iou {
                best_iou = iou;
                best_gt = Some(gi);
            }
        }
        if let Some(gi) = best_gt {
            if best_iou > threshold {
                assigned[ai] = Some(gi);
            }
        }
    }
    for (gi, g) in gts.iter().enumerate() {
        let mut best_anchor = None;
        let mut best_iou = f64::NEG_INFINITY;
        for (ai, a) in anchors.iter().enumerate() {
            let iou = crate::boxes::jaccard(a, g);
            if iou > best_iou {
                best_iou = iou;
                best_anchor = Some(ai);
            }
        }
        if let Some(ai) = best_anchor {
            assigned[ai] = Some(gi);
        }
    }
    assigned
}

/// Hard-negative selection by full sort: the `quota` background anchors with
/// the highest loss, ties broken by lower index.
pub fn hard_negatives_naive(losses: &[f64], is_background: &[bool], quota: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).filter(|&i| is_background[i]).collect();
    order.sort_by(|&a, &b| {
        losses[b]
            .partial_cmp(&losses[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(quota);
    order.sort_unstable();
    order
}

/// Average precision by explicit precision-recall enumeration.
///
/// `detections` are (score, box) for one class; `gts` the class's ground
/// truths. A detection is a true positive when its overlap with some
/// still-unmatched ground truth exceeds `iou_threshold` (greedy best
/// overlap, ties by ground-truth index). The area under the curve uses the
/// monotone precision envelope over all achieved recall points.
pub fn average_precision_naive(detections: &[(f64, BBox)], gts: &[BBox], iou_threshold: f64) -> f64 {
    if gts.is_empty() {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b].0
            .partial_cmp(&detections[a].0)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut matched = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(order.len());
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let iou = crate::boxes::jaccard(&detections[di].1, g);
            let better = match best {
                None => true,
                Some((_, bi)) => iou > bi,
            };
            if better {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou > iou_threshold => {
                matched[gi] = true;
                tp_flags.push(true);
            }
            _ => tp_flags.push(false),
        }
    }
    // precision/recall after every prefix
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    // integrate: for each step up in recall, take the max precision at
    // recall >= that level
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let envelope = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_recall) * envelope;
            prev_recall = r;
        }
    }
    ap
}

/// Central finite difference of a scalar function at `x`, one coordinate at
/// a time.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = f(&probe);
        probe[i] = orig - step;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative-tolerance gradient comparison with a small absolute floor.
pub fn grads_close(analytic: &[f64], numeric: &[f64], rel_tol: f64) -> Result<(), String> {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs()).max(1.0);
        if (a - n).abs() > rel_tol * scale {
            return Err(format!(
                "gradient mismatch at {}: analytic {} vs numeric {} (scale {})",
                i, a, n, scale
            ));
        }
    }
    Ok(())
}
