//! Streaming video inference: key-frame scheduling, refinement-state
//! propagation, and soft refinement.
//!
//! The reference generator runs only on key frames (every `k`-th frame,
//! starting at frame 0); the refinement detector runs on every frame with
//! the stored state. Scaling the stored anchor offsets by a coefficient in
//! [0,1] loosens the refined anchors so a stale state tolerates object
//! motion. Processing is strictly causal: a frame's detections depend only
//! on frames at or before it.

use std::time::Instant;

use crate::boxes::BBox;
use crate::data::VideoSequence;
use crate::eval::{mean_average_precision, ScoredBox, EVAL_IOU};
use crate::heads::RefinementState;
use crate::model::{Model, TemporalPair, Variant};
use crate::postprocess::{extract_detections, postprocess, Candidate, PostprocessConfig};
use crate::tensor::Tensor;

/// Key-frame duration and soft coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyFrameSchedule {
    pub k: usize,
    pub e: f64,
}

impl KeyFrameSchedule {
    pub fn new(k: usize, e: f64) -> Self {
        assert!(k >= 1, "key frame duration must be >= 1");
        assert!((0.0..=1.0).contains(&e), "soft coefficient must lie in [0,1], got {}", e);
        KeyFrameSchedule { k, e }
    }
}

/// Where the soft coefficient is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftApplication {
    /// Scale once when the state is created; key frames and propagated
    /// frames see the same softened state (single code path).
    AtStateCreation,
    /// Key frames use the raw state; only propagated frames see the
    /// softened one.
    PropagatedFramesOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalConfig {
    pub schedule: KeyFrameSchedule,
    pub soft_application: SoftApplication,
    /// Compute feature offsets from the softened anchor offsets instead of
    /// the raw ones.
    pub offsets_from_soft_ar: bool,
}

impl TemporalConfig {
    pub fn new(schedule: KeyFrameSchedule) -> Self {
        TemporalConfig {
            schedule,
            soft_application: SoftApplication::AtStateCreation,
            offsets_from_soft_ar: false,
        }
    }
}

/// Elementwise scaling of anchor offsets by the soft coefficient.
///
/// `e = 1` keeps the offsets; `e = 0` collapses the refinement so decoding
/// returns the original anchors.
pub fn soft_refine(offsets: &Tensor, e: f64) -> Tensor {
    assert!((0.0..=1.0).contains(&e), "soft coefficient must lie in [0,1], got {}", e);
    Tensor::from_vec(
        offsets.shape().to_vec(),
        offsets.data().iter().map(|v| v * e).collect(),
    )
}

/// Runs the reference generator on a key frame and prepares the state per
/// the temporal configuration.
pub fn make_reference(rg: &Model, frame: &Tensor, cfg: &TemporalConfig) -> StoredState {
    assert_eq!(rg.config.variant, Variant::Rg, "references come from a reference generator");
    let e = cfg.schedule.e;
    let mut raw = rg.reference_state(frame);
    if cfg.offsets_from_soft_ar && !raw.feature_offsets.iter().all(Vec::is_empty) {
        // recompute the offset convolutions from the softened offsets
        let softened: Vec<Tensor> =
            raw.anchor_offsets.iter().map(|t| soft_refine(t, e)).collect();
        let mut feature_offsets = Vec::with_capacity(softened.len());
        for (s, ar) in softened.iter().enumerate() {
            let mut per_path = Vec::with_capacity(rg.config.head.len());
            for (p, path) in rg.config.head.paths.iter().enumerate() {
                let w = rg.params.get(&format!("fr.p{}.s{}.w", p, s));
                let b = rg.params.get(&format!("fr.p{}.s{}.b", p, s));
                let out = crate::conv::conv2d_forward(
                    ar,
                    w,
                    b,
                    &crate::conv::ConvGeom { stride: 1, padding: 0, dilation: 1 },
                );
                per_path.push(crate::sampling::FeatureOffsets::new(out, (path.kernel, path.kernel)));
            }
            feature_offsets.push(per_path);
        }
        raw.feature_offsets = feature_offsets;
    }
    let soft = raw.soft_scaled(e);
    StoredState { raw, soft }
}

/// The state kept between key frames, in both raw and softened form.
#[derive(Debug, Clone)]
pub struct StoredState {
    pub raw: RefinementState,
    pub soft: RefinementState,
}

impl StoredState {
    fn for_frame<'a>(&'a self, is_key: bool, mode: SoftApplication) -> &'a RefinementState {
        match mode {
            SoftApplication::AtStateCreation => &self.soft,
            SoftApplication::PropagatedFramesOnly => {
                if is_key {
                    &self.raw
                } else {
                    &self.soft
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrameDetections {
    pub frame: usize,
    pub detections: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamStats {
    pub rg_calls: usize,
    pub rd_calls: usize,
    /// Wall time spent in network forwards (excludes post-processing).
    pub forward_seconds: f64,
}

/// Detects every frame of a clip under the key-frame schedule.
pub fn stream_detect(
    rg: &Model,
    rd: &Model,
    frames: &[&Tensor],
    cfg: &TemporalConfig,
    pp: &PostprocessConfig,
) -> (Vec<FrameDetections>, StreamStats) {
    let mut stats = StreamStats { rg_calls: 0, rd_calls: 0, forward_seconds: 0.0 };
    let mut out = Vec::with_capacity(frames.len());
    let mut stored: Option<StoredState> = None;
    for (m, frame) in frames.iter().enumerate() {
        let is_key = m % cfg.schedule.k == 0;
        if is_key {
            let t0 = Instant::now();
            stored = Some(make_reference(rg, frame, cfg));
            stats.forward_seconds += t0.elapsed().as_secs_f64();
            stats.rg_calls += 1;
        }
        let state = stored
            .as_ref()
            .expect("frame 0 is always a key frame")
            .for_frame(is_key, cfg.soft_application);
        let t0 = Instant::now();
        let pass = rd.forward_with_state(frame, state, false);
        let det = extract_detections(rd, &pass);
        stats.forward_seconds += t0.elapsed().as_secs_f64();
        stats.rd_calls += 1;
        out.push(FrameDetections {
            frame: m,
            detections: postprocess(&det, rd.config.num_classes, pp),
        });
    }
    (out, stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub e: f64,
    pub map: f64,
    pub rg_calls: usize,
    pub rd_calls: usize,
    pub ms_per_frame: f64,
}

/// Grid evaluation over key-frame durations and soft coefficients.
pub fn sweep(
    pair: &TemporalPair,
    clips: &[VideoSequence],
    ks: &[usize],
    es: &[f64],
    pp: &PostprocessConfig,
) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(ks.len() * es.len());
    for &k in ks {
        for &e in es {
            let cfg = TemporalConfig::new(KeyFrameSchedule::new(k, e));
            rows.push(evaluate_schedule(pair, clips, &cfg, pp));
        }
    }
    rows
}

/// Runs one (k, e) cell: streams every clip, pools detections, and scores
/// mAP over all frames.
pub fn evaluate_schedule(
    pair: &TemporalPair,
    clips: &[VideoSequence],
    cfg: &TemporalConfig,
    pp: &PostprocessConfig,
) -> SweepRow {
    let num_classes = pair.rd.config.num_classes;
    let mut dets_per_class: Vec<Vec<ScoredBox>> = vec![Vec::new(); num_classes];
    let mut gts_per_frame: Vec<Vec<(BBox, usize)>> = Vec::new();
    let mut rg_calls = 0;
    let mut rd_calls = 0;
    let mut seconds = 0.0;
    for clip in clips {
        let frames: Vec<&Tensor> = clip.frames.iter().map(|f| &f.image).collect();
        let (dets, stats) = stream_detect(&pair.rg, &pair.rd, &frames, cfg, pp);
        rg_calls += stats.rg_calls;
        rd_calls += stats.rd_calls;
        seconds += stats.forward_seconds;
        for (frame, fd) in clip.frames.iter().zip(&dets) {
            let image_id = gts_per_frame.len();
            gts_per_frame.push(frame.gts.clone());
            for c in &fd.detections {
                dets_per_class[c.class].push(ScoredBox {
                    image: image_id,
                    score: c.score,
                    bbox: c.bbox,
                });
            }
        }
    }
    let eval = mean_average_precision(&dets_per_class, &gts_per_frame, num_classes, EVAL_IOU);
    SweepRow {
        k: cfg.schedule.k,
        e: cfg.schedule.e,
        map: eval.mean,
        rg_calls,
        rd_calls,
        ms_per_frame: 1000.0 * seconds / rd_calls.max(1) as f64,
    }
}
