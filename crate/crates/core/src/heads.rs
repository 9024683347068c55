//! Detection heads: anchor refinement, feature location refinement, and the
//! deformable anchor-offset detection with multi-path fusion.
//!
//! The anchor refinement convolution predicts per-anchor coordinate offsets
//! from first-stage features. A 1x1 convolution maps those offsets to
//! per-tap sampling offsets, so the detection convolutions read features
//! where the refined anchors are, not where the original grid was. The
//! final localization is decoded in two steps: head offsets against the
//! refined anchor, which is itself the anchor refinement decoded against
//! the original anchor.
//!
//! Channel conventions per scale, for `A` anchors per cell and `C`
//! foreground classes:
//!   anchor offsets  [1, 4A, H, W]   channel a*4 + (tx,ty,tw,th)
//!   class logits    [1, (C+1)A, H, W]  channel a*(C+1) + cls, cls 0 = background
//!   box offsets     [1, 4A, H, W]   same coordinate order as anchor offsets

use crate::boxes::{decode, BBox, BoxSet, OffsetCoding, ScaleLayout};
use crate::sampling::FeatureOffsets;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// One detection path: odd square kernel plus dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadPath {
    pub kernel: usize,
    pub dilation: usize,
}

impl HeadPath {
    pub fn new(kernel: usize, dilation: usize) -> Self {
        assert!(kernel % 2 == 1, "head kernels must be odd, got {}", kernel);
        assert!(dilation >= 1, "dilation must be >= 1");
        HeadPath { kernel, dilation }
    }

    /// Same-padding for stride-1 heads.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn offset_channels(&self) -> usize {
        2 * self.kernel * self.kernel
    }
}

/// The set of parallel detection paths fused by summation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHeadConfig {
    pub paths: Vec<HeadPath>,
}

impl MultiHeadConfig {
    pub fn new(paths: Vec<HeadPath>) -> Self {
        assert!(!paths.is_empty(), "at least one detection path is required");
        MultiHeadConfig { paths }
    }

    /// 3x3 plus 5x5, both undilated: the efficient two-path design.
    pub fn default_dual() -> Self {
        MultiHeadConfig::new(vec![HeadPath::new(3, 1), HeadPath::new(5, 1)])
    }

    pub fn single() -> Self {
        MultiHeadConfig::new(vec![HeadPath::new(3, 1)])
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Weight/bias pair of one convolution, already registered on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: TensorId,
    pub bias: TensorId,
}

/// Class logits and box offsets of one scale.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub conf: TensorId,
    pub loc: TensorId,
}

/// Anchor refinement: a 3x3 same-padded convolution per scale producing
/// per-anchor coordinate offsets in coding units.
pub fn arm_forward(tape: &mut Tape, features: &[TensorId], weights: &[ConvParams]) -> Vec<TensorId> {
    assert_eq!(
        features.len(),
        weights.len(),
        "arm_forward got {} feature scales but {} weight sets",
        features.len(),
        weights.len()
    );
    features
        .iter()
        .zip(weights)
        .map(|(&f, w)| tape.conv2d(f, w.weight, w.bias, 1, 1, 1))
        .collect()
}

/// Feature location refinement: per-path 1x1 convolution mapping anchor
/// offsets to sampling offsets. The offsets depend only on the anchor
/// refinement (and the learned mapping), not on the detection features.
pub fn feature_location_refine(
    tape: &mut Tape,
    anchor_offsets: TensorId,
    path_weights: &[ConvParams],
    config: &MultiHeadConfig,
) -> Vec<TensorId> {
    assert_eq!(
        path_weights.len(),
        config.paths.len(),
        "one offset conv per detection path"
    );
    config
        .paths
        .iter()
        .zip(path_weights)
        .map(|(path, w)| {
            let wt = tape.value(w.weight);
            let (oc, _, kh, kw) = wt.dims4();
            assert_eq!(
                (kh, kw),
                (1, 1),
                "feature location refinement requires 1x1 kernels, got {}x{}",
                kh,
                kw
            );
            assert_eq!(
                oc,
                path.offset_channels(),
                "offset conv produces {} channels, path needs {}",
                oc,
                path.offset_channels()
            );
            tape.conv2d(anchor_offsets, w.weight, w.bias, 1, 0, 1)
        })
        .collect()
}

/// The original deformable-convolution offset source: offsets predicted
/// from the detection features themselves (the ablation the feature
/// location refinement replaces).
pub fn offsets_from_features(
    tape: &mut Tape,
    odm_features: TensorId,
    weights: &ConvParams,
    path: HeadPath,
) -> TensorId {
    let wt = tape.value(weights.weight);
    let oc = wt.dim(0);
    assert_eq!(
        oc,
        path.offset_channels(),
        "offset conv produces {} channels, path needs {}",
        oc,
        path.offset_channels()
    );
    tape.conv2d(odm_features, weights.weight, weights.bias, 1, path.padding(), path.dilation)
}

/// Multi-path detection: per-path deformable (or plain) convolutions for
/// confidence and localization, fused by elementwise summation.
///
/// `offsets[p]` supplies the sampling offsets of path `p`; `None` runs the
/// plain convolution (the traditional detection head).
pub fn multi_head_detect(
    tape: &mut Tape,
    odm_features: TensorId,
    offsets: &[Option<TensorId>],
    conf_weights: &[ConvParams],
    loc_weights: &[ConvParams],
    config: &MultiHeadConfig,
) -> HeadOutput {
    let l = config.paths.len();
    assert_eq!(offsets.len(), l, "offsets for {} paths, config has {}", offsets.len(), l);
    assert_eq!(conf_weights.len(), l, "conf weights for every path");
    assert_eq!(loc_weights.len(), l, "loc weights for every path");

    let mut conf_sum: Option<TensorId> = None;
    let mut loc_sum: Option<TensorId> = None;
    for (p, path) in config.paths.iter().enumerate() {
        for w in [&conf_weights[p], &loc_weights[p]] {
            let (_, _, kh, kw) = tape.value(w.weight).dims4();
            assert_eq!(
                (kh, kw),
                (path.kernel, path.kernel),
                "path {} weights are {}x{}, expected {}x{}",
                p,
                kh,
                kw,
                path.kernel,
                path.kernel
            );
        }
        let (conf, loc) = match offsets[p] {
            Some(off) => (
                tape.deform_conv2d(odm_features, conf_weights[p].weight, conf_weights[p].bias, off, 1, path.padding(), path.dilation),
                tape.deform_conv2d(odm_features, loc_weights[p].weight, loc_weights[p].bias, off, 1, path.padding(), path.dilation),
            ),
            None => (
                tape.conv2d(odm_features, conf_weights[p].weight, conf_weights[p].bias, 1, path.padding(), path.dilation),
                tape.conv2d(odm_features, loc_weights[p].weight, loc_weights[p].bias, 1, path.padding(), path.dilation),
            ),
        };
        conf_sum = Some(match conf_sum {
            None => conf,
            Some(acc) => tape.add(acc, conf),
        });
        loc_sum = Some(match loc_sum {
            None => loc,
            Some(acc) => tape.add(acc, loc),
        });
    }
    HeadOutput {
        conf: conf_sum.unwrap(),
        loc: loc_sum.unwrap(),
    }
}

/// Single-path anchor-offset detection; the multi-head with L = 1.
pub fn anchor_offset_detect(
    tape: &mut Tape,
    odm_features: TensorId,
    offsets: Option<TensorId>,
    conf_weights: ConvParams,
    loc_weights: ConvParams,
    path: HeadPath,
) -> HeadOutput {
    multi_head_detect(
        tape,
        odm_features,
        &[offsets],
        &[conf_weights],
        &[loc_weights],
        &MultiHeadConfig::new(vec![path]),
    )
}

/// Per-scale refinement products carried between networks: anchor offsets
/// plus one sampling-offset tensor per detection path (empty when the
/// consumer runs plain convolutions).
#[derive(Debug, Clone)]
pub struct RefinementState {
    pub anchor_offsets: Vec<Tensor>,
    pub feature_offsets: Vec<Vec<FeatureOffsets>>,
}

impl RefinementState {
    pub fn scales(&self) -> usize {
        self.anchor_offsets.len()
    }

    /// All anchor offsets scaled elementwise; feature offsets untouched.
    pub fn soft_scaled(&self, e: f64) -> RefinementState {
        RefinementState {
            anchor_offsets: self
                .anchor_offsets
                .iter()
                .map(|t| crate::temporal::soft_refine(t, e))
                .collect(),
            feature_offsets: self.feature_offsets.clone(),
        }
    }
}

/// Decodes per-scale anchor-offset tensors against the original anchors.
///
/// With all offsets zero this returns the original anchors unchanged.
pub fn refined_anchor_boxes(
    anchor_offsets: &[Tensor],
    anchors: &BoxSet,
    coding: &OffsetCoding,
    clip_to: Option<f64>,
) -> Vec<BBox> {
    assert_eq!(
        anchor_offsets.len(),
        anchors.layouts().len(),
        "one anchor-offset tensor per scale"
    );
    let mut out = Vec::with_capacity(anchors.len());
    for (l, t) in anchor_offsets.iter().enumerate() {
        let lay = &anchors.layouts()[l];
        check_scale_tensor(t, lay, 4, "anchor offsets");
        let (_, _, h, w) = t.dims4();
        for i in 0..h {
            for j in 0..w {
                for a in 0..lay.anchors_per_cell {
                    let offs = [
                        t.at4(0, a * 4, i, j),
                        t.at4(0, a * 4 + 1, i, j),
                        t.at4(0, a * 4 + 2, i, j),
                        t.at4(0, a * 4 + 3, i, j),
                    ];
                    let ao = anchors.get(lay.anchor_index(i, j, a));
                    let mut refined = decode(&offs, ao, coding);
                    if let Some(size) = clip_to {
                        refined = refined.clipped_to(size);
                    }
                    out.push(refined);
                }
            }
        }
    }
    out
}

pub(crate) fn check_scale_tensor(t: &Tensor, lay: &ScaleLayout, per_anchor: usize, what: &str) {
    let (n, c, h, w) = t.dims4();
    assert_eq!(n, 1, "{} tensors are single-batch", what);
    assert_eq!(
        (h, w),
        (lay.h, lay.w),
        "{} grid {}x{} does not match anchor layout {}x{}",
        what,
        h,
        w,
        lay.h,
        lay.w
    );
    assert_eq!(
        c,
        per_anchor * lay.anchors_per_cell,
        "{} channel extent {} != {}*{}",
        what,
        c,
        per_anchor,
        lay.anchors_per_cell
    );
}

/// Final per-anchor outputs: class scores (softmaxed, background included)
/// and boxes decoded against the refined anchors.
#[derive(Debug, Clone)]
pub struct DetectionOutput {
    /// Per anchor, C+1 scores summing to one; index 0 is background.
    pub scores: Vec<Vec<f64>>,
    /// Raw per-anchor box offsets in coding units.
    pub offsets: Vec<[f64; 4]>,
    /// Boxes after both decode steps, in anchor order.
    pub boxes: Vec<BBox>,
}

/// Extracts per-anchor detections from head outputs.
///
/// `refined` must list the refined anchor of every anchor slot in set
/// order; pass the original anchors for an unrefined head.
pub fn decode_detections(
    logits: &[Tensor],
    loc: &[Tensor],
    refined: &[BBox],
    anchors: &BoxSet,
    num_classes: usize,
    coding: &OffsetCoding,
) -> DetectionOutput {
    assert_eq!(refined.len(), anchors.len(), "one refined anchor per anchor");
    let classes = num_classes + 1;
    let mut scores = Vec::with_capacity(anchors.len());
    let mut offsets = Vec::with_capacity(anchors.len());
    let mut boxes = Vec::with_capacity(anchors.len());
    for (l, lay) in anchors.layouts().iter().enumerate() {
        let lg = &logits[l];
        let lc = &loc[l];
        check_scale_tensor(lg, lay, classes, "class logits");
        check_scale_tensor(lc, lay, 4, "box offsets");
        for i in 0..lay.h {
            for j in 0..lay.w {
                for a in 0..lay.anchors_per_cell {
                    let mut row: Vec<f64> = (0..classes)
                        .map(|c| lg.at4(0, a * classes + c, i, j))
                        .collect();
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        denom += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= denom;
                    }
                    let offs = [
                        lc.at4(0, a * 4, i, j),
                        lc.at4(0, a * 4 + 1, i, j),
                        lc.at4(0, a * 4 + 2, i, j),
                        lc.at4(0, a * 4 + 3, i, j),
                    ];
                    let idx = lay.anchor_index(i, j, a);
                    boxes.push(decode(&offs, &refined[idx], coding));
                    scores.push(row);
                    offsets.push(offs);
                }
            }
        }
    }
    DetectionOutput { scores, offsets, boxes }
}
