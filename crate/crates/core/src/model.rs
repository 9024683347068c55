//! Network assembly: a small four-scale backbone, top-down feature fusion,
//! and the per-variant wiring of refinement and detection heads.
//!
//! All variants share the same trunk (backbone plus fusion), which is what
//! makes the structural reductions exact: a dual-refinement network with
//! zeroed refinement heads produces the same logits as the plain four-scale
//! baseline, and a refinement detector fed an all-zero state is that same
//! baseline.
//!
//! Variants:
//! - `Drnet`: anchor refinement on backbone features, feature location
//!   refinement, multi-path (optionally deformable) heads on fused features.
//! - `Ssd4s`: plain convolution heads on fused features; the baseline.
//! - `Rg`: reference generator; emits anchor offsets (and per-path feature
//!   offsets when the paired detector is deformable) and has no detection
//!   head.
//! - `Rd`: refinement detector; detection heads that consume an externally
//!   supplied refinement state.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::afw;
use crate::boxes::{generate_anchors, BoxSet, OffsetCoding};
use crate::heads::{
    arm_forward, feature_location_refine, multi_head_detect, offsets_from_features, ConvParams,
    HeadOutput, HeadPath, MultiHeadConfig, RefinementState,
};
use crate::sampling::FeatureOffsets;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Drnet,
    Ssd4s,
    Rg,
    Rd,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Drnet => "drnet",
            Variant::Ssd4s => "ssd4s",
            Variant::Rg => "rg",
            Variant::Rd => "rd",
        };
        f.write_str(s)
    }
}

/// Where the detection head's sampling offsets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureRefineMode {
    /// From the anchor refinement through a 1x1 convolution.
    FromAnchorOffsets,
    /// From the detection features themselves, as in the original
    /// deformable pipeline (ablation mode).
    FromFeatures,
    /// No offsets: the deformable head samples its regular grid.
    Off,
}

impl fmt::Display for FeatureRefineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureRefineMode::FromAnchorOffsets => "anchor_offsets",
            FeatureRefineMode::FromFeatures => "features",
            FeatureRefineMode::Off => "off",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_size: usize,
    pub in_channels: usize,
    pub channels: [usize; 4],
    pub fusion_channels: usize,
    pub strides: [usize; 4],
    pub anchor_scales: [f64; 4],
    pub ratios: Vec<f64>,
    pub num_classes: usize,
    pub head: MultiHeadConfig,
    pub deform_head: bool,
    pub feature_refine: FeatureRefineMode,
    pub coding: OffsetCoding,
    pub clip_refined_anchors: bool,
    pub grad_through_refined_decode: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Drnet,
            input_size: 64,
            in_channels: 1,
            channels: [16, 32, 64, 64],
            fusion_channels: 48,
            strides: [4, 8, 16, 32],
            anchor_scales: [8.0, 16.0, 32.0, 48.0],
            ratios: vec![1.0, 2.0, 0.5],
            num_classes: 3,
            head: MultiHeadConfig::default_dual(),
            deform_head: true,
            feature_refine: FeatureRefineMode::FromAnchorOffsets,
            coding: OffsetCoding::default(),
            clip_refined_anchors: false,
            grad_through_refined_decode: false,
        }
    }
}

impl ModelConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.ratios.len()
    }

    /// Feature grid (h, w) per scale.
    pub fn feature_shapes(&self) -> Vec<(usize, usize)> {
        self.strides
            .iter()
            .map(|&s| (self.input_size / s, self.input_size / s))
            .collect()
    }

    pub fn anchors(&self) -> BoxSet {
        generate_anchors(
            &self.feature_shapes(),
            &self.strides,
            &self.anchor_scales,
            &self.ratios,
        )
    }

    fn validate(&self) {
        assert!(self.input_size > 0 && self.in_channels > 0);
        assert!(!self.ratios.is_empty(), "at least one anchor ratio");
        assert!(self.num_classes >= 1, "at least one foreground class");
        assert!(
            self.strides[0].is_power_of_two() && self.strides[0] >= 2,
            "first stride must be a power of two >= 2, got {}",
            self.strides[0]
        );
        for i in 0..3 {
            assert_eq!(
                self.strides[i + 1],
                2 * self.strides[i],
                "strides must double between scales (top-down fusion upsamples 2x)"
            );
        }
        assert_eq!(
            self.input_size % self.strides[3],
            0,
            "input size {} is not divisible by the deepest stride {}",
            self.input_size,
            self.strides[3]
        );
        assert!(
            self.input_size / self.strides[3] >= 1,
            "deepest feature map is empty"
        );
        if self.variant == Variant::Ssd4s {
            assert!(
                !self.deform_head,
                "the plain four-scale baseline uses traditional convolution heads"
            );
        }
        if self.variant == Variant::Rg {
            assert_ne!(
                self.feature_refine,
                FeatureRefineMode::FromFeatures,
                "a reference generator predicts offsets from anchor offsets only"
            );
        }
    }

    fn has_fpn(&self) -> bool {
        !matches!(self.variant, Variant::Rg)
    }

    fn has_arm(&self) -> bool {
        matches!(self.variant, Variant::Drnet | Variant::Rg)
    }

    fn has_detection_head(&self) -> bool {
        !matches!(self.variant, Variant::Rg)
    }

    /// Offset convs predicted from anchor offsets (1x1 on `ar`).
    fn has_offset_convs_from_ar(&self) -> bool {
        self.deform_head
            && self.feature_refine == FeatureRefineMode::FromAnchorOffsets
            && self.has_arm()
    }

    /// Offset convs predicted from fused features (ablation mode).
    fn has_offset_convs_from_features(&self) -> bool {
        self.deform_head
            && self.feature_refine == FeatureRefineMode::FromFeatures
            && self.variant == Variant::Drnet
    }

    fn stem_downsamples(&self) -> usize {
        self.strides[0].trailing_zeros() as usize
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

/// Ordered, name-addressable parameter store.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn add(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {}",
            name
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name));
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name));
        &mut self.entries[idx].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut (String, Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// TensorIds of one pass's bound parameters, aligned with [`ParamSet`]
/// entry order.
#[derive(Debug, Clone)]
pub struct Bindings {
    ids: Vec<TensorId>,
    index: HashMap<String, TensorId>,
}

impl Bindings {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter {} not bound in this pass", name))
    }

    pub fn conv(&self, name: &str) -> ConvParams {
        ConvParams {
            weight: self.id(&format!("{}.w", name)),
            bias: self.id(&format!("{}.b", name)),
        }
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

// ── Model ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    anchors: BoxSet,
}

/// TensorIds produced by one forward pass.
pub struct NetworkPass {
    pub tape: Tape,
    /// Per-scale anchor offsets; empty when the variant predicts none.
    pub ar: Vec<TensorId>,
    /// Per-scale, per-path sampling offsets actually fed to the heads.
    pub offsets: Vec<Vec<Option<TensorId>>>,
    /// Per-scale detection outputs; empty for a reference generator.
    pub heads: Vec<HeadOutput>,
    pub bindings: Bindings,
}

impl Model {
    /// Deterministic build: He-uniform fan-in scaling for trunk and head
    /// convolutions, zeros everywhere in the refinement heads so a fresh
    /// network behaves as its plain counterpart.
    pub fn build(config: ModelConfig, seed: u64) -> Model {
        config.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let a = config.anchors_per_cell();
        let classes = config.num_classes + 1;

        let add_conv = |params: &mut ParamSet,
                            rng: &mut ChaCha8Rng,
                            name: &str,
                            co: usize,
                            ci: usize,
                            k: usize,
                            zero: bool| {
            let fan_in = (ci * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let data: Vec<f64> = if zero {
                vec![0.0; co * ci * k * k]
            } else {
                (0..co * ci * k * k).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.add(&format!("{}.w", name), Tensor::from_vec(vec![co, ci, k, k], data));
            params.add(&format!("{}.b", name), Tensor::zeros(vec![co]));
        };

        // backbone: stem downsamples to the first stride, then one refine
        // conv per stage, one downsample conv between stages
        for d in 0..config.stem_downsamples() {
            let ci = if d == 0 { config.in_channels } else { config.channels[0] };
            add_conv(&mut params, &mut rng, &format!("backbone.s0.down{}", d), config.channels[0], ci, 3, false);
        }
        add_conv(&mut params, &mut rng, "backbone.s0.conv", config.channels[0], config.channels[0], 3, false);
        for s in 1..4 {
            add_conv(&mut params, &mut rng, &format!("backbone.s{}.down0", s), config.channels[s], config.channels[s - 1], 3, false);
            add_conv(&mut params, &mut rng, &format!("backbone.s{}.conv", s), config.channels[s], config.channels[s], 3, false);
        }

        if config.has_fpn() {
            for s in 0..4 {
                add_conv(&mut params, &mut rng, &format!("fpn.lat{}", s), config.fusion_channels, config.channels[s], 1, false);
            }
            for s in 0..4 {
                add_conv(&mut params, &mut rng, &format!("fpn.smooth{}", s), config.fusion_channels, config.fusion_channels, 3, false);
            }
        }

        if config.has_arm() {
            for s in 0..4 {
                add_conv(&mut params, &mut rng, &format!("arm.s{}", s), 4 * a, config.channels[s], 3, true);
            }
        }

        if config.has_offset_convs_from_ar() {
            for (p, path) in config.head.paths.iter().enumerate() {
                for s in 0..4 {
                    add_conv(&mut params, &mut rng, &format!("fr.p{}.s{}", p, s), path.offset_channels(), 4 * a, 1, true);
                }
            }
        }
        if config.has_offset_convs_from_features() {
            for (p, path) in config.head.paths.iter().enumerate() {
                for s in 0..4 {
                    add_conv(&mut params, &mut rng, &format!("fr.p{}.s{}", p, s), path.offset_channels(), config.fusion_channels, path.kernel, true);
                }
            }
        }

        if config.has_detection_head() {
            for (p, path) in config.head.paths.iter().enumerate() {
                for s in 0..4 {
                    add_conv(&mut params, &mut rng, &format!("head.p{}.conf.s{}", p, s), classes * a, config.fusion_channels, path.kernel, false);
                    add_conv(&mut params, &mut rng, &format!("head.p{}.loc.s{}", p, s), 4 * a, config.fusion_channels, path.kernel, false);
                }
            }
        }

        let anchors = config.anchors();
        Model { config, params, anchors }
    }

    pub fn anchors(&self) -> &BoxSet {
        &self.anchors
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Binds every parameter onto the tape, optionally with an identifier
    /// prefix (used when two networks share one tape).
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bindings {
        let mut ids = Vec::with_capacity(self.params.len());
        let mut index = HashMap::with_capacity(self.params.len());
        for (name, tensor) in self.params.iter() {
            let id = tape.leaf(tensor.clone(), requires_grad);
            ids.push(id);
            index.insert(name.clone(), id);
        }
        Bindings { ids, index }
    }

    fn backbone(&self, tape: &mut Tape, b: &Bindings, image: TensorId) -> Vec<TensorId> {
        let cfg = &self.config;
        let mut x = image;
        let mut feats = Vec::with_capacity(4);
        for d in 0..cfg.stem_downsamples() {
            let c = b.conv(&format!("backbone.s0.down{}", d));
            x = tape.conv2d(x, c.weight, c.bias, 2, 1, 1);
            x = tape.relu(x);
        }
        let c = b.conv("backbone.s0.conv");
        x = tape.conv2d(x, c.weight, c.bias, 1, 1, 1);
        x = tape.relu(x);
        feats.push(x);
        for s in 1..4 {
            let c = b.conv(&format!("backbone.s{}.down0", s));
            x = tape.conv2d(x, c.weight, c.bias, 2, 1, 1);
            x = tape.relu(x);
            let c = b.conv(&format!("backbone.s{}.conv", s));
            x = tape.conv2d(x, c.weight, c.bias, 1, 1, 1);
            x = tape.relu(x);
            feats.push(x);
        }
        feats
    }

    /// Top-down fusion: 1x1 lateral projections, nearest 2x upsample-add,
    /// then a 3x3 convolution per level.
    fn top_down(&self, tape: &mut Tape, b: &Bindings, feats: &[TensorId]) -> Vec<TensorId> {
        let lats: Vec<TensorId> = (0..4)
            .map(|s| {
                let c = b.conv(&format!("fpn.lat{}", s));
                tape.conv2d(feats[s], c.weight, c.bias, 1, 0, 1)
            })
            .collect();
        let mut fused = vec![None; 4];
        let mut carry = lats[3];
        let c = b.conv("fpn.smooth3");
        fused[3] = Some(tape.conv2d(carry, c.weight, c.bias, 1, 1, 1));
        for s in (0..3).rev() {
            let up = tape.upsample_nearest2x(carry);
            carry = tape.add(lats[s], up);
            let c = b.conv(&format!("fpn.smooth{}", s));
            fused[s] = Some(tape.conv2d(carry, c.weight, c.bias, 1, 1, 1));
        }
        fused.into_iter().map(Option::unwrap).collect()
    }

    fn arm_heads(&self, tape: &mut Tape, b: &Bindings, feats: &[TensorId]) -> Vec<TensorId> {
        let weights: Vec<ConvParams> = (0..4).map(|s| b.conv(&format!("arm.s{}", s))).collect();
        arm_forward(tape, feats, &weights)
    }

    fn path_offsets(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        ar: &[TensorId],
        odm: &[TensorId],
    ) -> Vec<Vec<Option<TensorId>>> {
        let cfg = &self.config;
        let paths = &cfg.head.paths;
        let mut per_scale = Vec::with_capacity(4);
        for s in 0..4 {
            let mut row = Vec::with_capacity(paths.len());
            for (p, path) in paths.iter().enumerate() {
                let off = if !cfg.deform_head {
                    None
                } else {
                    match cfg.feature_refine {
                        FeatureRefineMode::FromAnchorOffsets => {
                            let w = b.conv(&format!("fr.p{}.s{}", p, s));
                            Some(
                                feature_location_refine(
                                    tape,
                                    ar[s],
                                    &[w],
                                    &MultiHeadConfig::new(vec![*path]),
                                )[0],
                            )
                        }
                        FeatureRefineMode::FromFeatures => {
                            let w = b.conv(&format!("fr.p{}.s{}", p, s));
                            Some(offsets_from_features(tape, odm[s], &w, *path))
                        }
                        FeatureRefineMode::Off => {
                            let (h, w) = self.config.feature_shapes()[s];
                            let zeros =
                                Tensor::zeros(vec![1, path.offset_channels(), h, w]);
                            Some(tape.leaf(zeros, false))
                        }
                    }
                };
                row.push(off);
            }
            per_scale.push(row);
        }
        per_scale
    }

    fn detection_heads(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        odm: &[TensorId],
        offsets: &[Vec<Option<TensorId>>],
    ) -> Vec<HeadOutput> {
        let paths = &self.config.head;
        (0..4)
            .map(|s| {
                let conf: Vec<ConvParams> = (0..paths.len())
                    .map(|p| b.conv(&format!("head.p{}.conf.s{}", p, s)))
                    .collect();
                let loc: Vec<ConvParams> = (0..paths.len())
                    .map(|p| b.conv(&format!("head.p{}.loc.s{}", p, s)))
                    .collect();
                multi_head_detect(tape, odm[s], &offsets[s], &conf, &loc, paths)
            })
            .collect()
    }

    fn check_image(&self, image: &Tensor) {
        let (n, c, h, w) = image.dims4();
        assert_eq!(
            (n, c, h, w),
            (1, self.config.in_channels, self.config.input_size, self.config.input_size),
            "image shape {:?} does not match configured input {}x{} ({} channels)",
            image.shape(),
            self.config.input_size,
            self.config.input_size,
            self.config.in_channels
        );
    }

    /// Forward for self-contained variants (`Drnet`, `Ssd4s`, `Rg`).
    pub fn forward(&self, image: &Tensor, train: bool) -> NetworkPass {
        assert_ne!(
            self.config.variant,
            Variant::Rd,
            "a refinement detector needs a state; use forward_with_state"
        );
        self.check_image(image);
        let mut tape = Tape::new();
        let bindings = self.bind(&mut tape, train);
        let image_id = tape.leaf(image.clone(), false);
        let feats = self.backbone(&mut tape, &bindings, image_id);

        let ar = if self.config.has_arm() {
            self.arm_heads(&mut tape, &bindings, &feats)
        } else {
            Vec::new()
        };

        if self.config.variant == Variant::Rg {
            // offsets from anchor offsets only; no detection head
            let offsets = if self.config.has_offset_convs_from_ar() {
                self.path_offsets(&mut tape, &bindings, &ar, &[])
            } else {
                Vec::new()
            };
            return NetworkPass { tape, ar, offsets, heads: Vec::new(), bindings };
        }

        let odm = self.top_down(&mut tape, &bindings, &feats);
        let offsets = if self.config.has_detection_head() {
            self.path_offsets(&mut tape, &bindings, &ar, &odm)
        } else {
            Vec::new()
        };
        let heads = self.detection_heads(&mut tape, &bindings, &odm, &offsets);
        NetworkPass { tape, ar, offsets, heads, bindings }
    }

    /// Forward of a refinement detector against an externally supplied
    /// state (its own fresh one, or a stale one from a previous key frame).
    pub fn forward_with_state(&self, image: &Tensor, state: &RefinementState, train: bool) -> NetworkPass {
        assert_eq!(self.config.variant, Variant::Rd, "only refinement detectors consume states");
        self.check_image(image);
        self.validate_state(state);
        let mut tape = Tape::new();
        let bindings = self.bind(&mut tape, train);
        let image_id = tape.leaf(image.clone(), false);
        let feats = self.backbone(&mut tape, &bindings, image_id);
        let odm = self.top_down(&mut tape, &bindings, &feats);

        let ar: Vec<TensorId> = state
            .anchor_offsets
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect();
        let offsets: Vec<Vec<Option<TensorId>>> = if self.config.deform_head {
            state
                .feature_offsets
                .iter()
                .map(|per_path| {
                    per_path
                        .iter()
                        .map(|fo| Some(tape.leaf(fo.data().clone(), false)))
                        .collect()
                })
                .collect()
        } else {
            (0..4).map(|_| vec![None; self.config.head.len()]).collect()
        };
        let heads = self.detection_heads(&mut tape, &bindings, &odm, &offsets);
        NetworkPass { tape, ar, offsets, heads, bindings }
    }

    /// Checks a propagated state against this detector's scale layout.
    pub fn validate_state(&self, state: &RefinementState) {
        let shapes = self.config.feature_shapes();
        assert_eq!(
            state.scales(),
            shapes.len(),
            "state carries {} scales, detector expects {}",
            state.scales(),
            shapes.len()
        );
        let a = self.config.anchors_per_cell();
        for (s, t) in state.anchor_offsets.iter().enumerate() {
            let (_, c, h, w) = t.dims4();
            assert_eq!(
                (c, h, w),
                (4 * a, shapes[s].0, shapes[s].1),
                "state scale {} has grid {}x{} ({} ch), detector expects {}x{} ({} ch)",
                s,
                h,
                w,
                c,
                shapes[s].0,
                shapes[s].1,
                4 * a
            );
        }
        if self.config.deform_head {
            assert_eq!(
                state.feature_offsets.len(),
                state.anchor_offsets.len(),
                "deformable detector needs feature offsets for every scale"
            );
            for (s, per_path) in state.feature_offsets.iter().enumerate() {
                assert_eq!(
                    per_path.len(),
                    self.config.head.len(),
                    "state scale {} carries {} offset paths, head has {}",
                    s,
                    per_path.len(),
                    self.config.head.len()
                );
                for (p, fo) in per_path.iter().enumerate() {
                    assert_eq!(
                        fo.kernel(),
                        (self.config.head.paths[p].kernel, self.config.head.paths[p].kernel),
                        "offset path {} kernel mismatch",
                        p
                    );
                }
            }
        }
    }

    /// Runs a reference generator and extracts its refinement state.
    pub fn reference_state(&self, image: &Tensor) -> RefinementState {
        assert_eq!(self.config.variant, Variant::Rg, "only reference generators emit states");
        let pass = self.forward(image, false);
        let anchor_offsets: Vec<Tensor> =
            pass.ar.iter().map(|&id| pass.tape.value(id).clone()).collect();
        let feature_offsets: Vec<Vec<FeatureOffsets>> = pass
            .offsets
            .iter()
            .map(|per_path| {
                per_path
                    .iter()
                    .enumerate()
                    .map(|(p, off)| {
                        let k = self.config.head.paths[p].kernel;
                        FeatureOffsets::new(pass.tape.value(off.unwrap()).clone(), (k, k))
                    })
                    .collect()
            })
            .collect();
        RefinementState { anchor_offsets, feature_offsets }
    }

    /// An all-zero state matching this model's layout (refined anchors
    /// collapse to the original anchors; deformable heads sample their
    /// regular grid).
    pub fn zero_state(&self) -> RefinementState {
        let a = self.config.anchors_per_cell();
        let shapes = self.config.feature_shapes();
        let anchor_offsets = shapes
            .iter()
            .map(|&(h, w)| Tensor::zeros(vec![1, 4 * a, h, w]))
            .collect();
        let feature_offsets = if self.config.deform_head {
            shapes
                .iter()
                .map(|&(h, w)| {
                    self.config
                        .head
                        .paths
                        .iter()
                        .map(|p| FeatureOffsets::zeros((p.kernel, p.kernel), h, w))
                        .collect()
                })
                .collect()
        } else {
            shapes.iter().map(|_| Vec::new()).collect()
        };
        RefinementState { anchor_offsets, feature_offsets }
    }
}

// ── Joint RG/RD pass ────────────────────────────────────────────────────

/// One tape spanning a reference generator and a refinement detector, so
/// detection losses reach the generator's weights through the offsets it
/// produced.
pub struct PairPass {
    pub tape: Tape,
    pub ar: Vec<TensorId>,
    pub offsets: Vec<Vec<Option<TensorId>>>,
    pub heads: Vec<HeadOutput>,
    pub rg_bindings: Bindings,
    pub rd_bindings: Bindings,
}

pub fn forward_pair(rg: &Model, rd: &Model, image: &Tensor, train: bool) -> PairPass {
    assert_eq!(rg.config.variant, Variant::Rg);
    assert_eq!(rd.config.variant, Variant::Rd);
    rg.check_image(image);
    let mut tape = Tape::new();
    let rg_bindings = rg.bind(&mut tape, train);
    let rd_bindings = rd.bind(&mut tape, train);
    let image_id = tape.leaf(image.clone(), false);

    let rg_feats = rg.backbone(&mut tape, &rg_bindings, image_id);
    let ar = rg.arm_heads(&mut tape, &rg_bindings, &rg_feats);
    let offsets: Vec<Vec<Option<TensorId>>> = if rg.config.has_offset_convs_from_ar() {
        rg.path_offsets(&mut tape, &rg_bindings, &ar, &[])
    } else {
        (0..4).map(|_| vec![None; rd.config.head.len()]).collect()
    };

    let rd_feats = rd.backbone(&mut tape, &rd_bindings, image_id);
    let odm = rd.top_down(&mut tape, &rd_bindings, &rd_feats);
    let heads = rd.detection_heads(&mut tape, &rd_bindings, &odm, &offsets);
    PairPass { tape, ar, offsets, heads, rg_bindings, rd_bindings }
}

// ── Checkpoints ─────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Container(#[from] afw::AfwError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {0}: expected key=value")]
    BadLine(usize),
    #[error("unknown config key '{0}'; valid keys: {1}")]
    UnknownKey(String, String),
    #[error("config key {0}: {1}")]
    BadValue(String, String),
    #[error("missing config key {0}")]
    MissingKey(String),
    #[error("checkpoint parameter mismatch: {0}")]
    ParamMismatch(String),
}

const CONFIG_KEYS: &[&str] = &[
    "variant",
    "input_size",
    "in_channels",
    "channels",
    "fusion_channels",
    "strides",
    "anchor_scales",
    "ratios",
    "classes",
    "head_paths",
    "deform_head",
    "feature_refine",
    "coding_center",
    "coding_size",
    "clip_refined_anchors",
    "grad_through_refined_decode",
];

impl ModelConfig {
    /// Key=value serialization (UTF-8 lines, stable key order).
    pub fn to_kv(&self) -> String {
        let join_u = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let join_f = |v: &[f64]| v.iter().map(|x| format!("{}", x)).collect::<Vec<_>>().join(",");
        let paths = self
            .head
            .paths
            .iter()
            .map(|p| format!("{}x{}", p.kernel, p.dilation))
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        s.push_str(&format!("variant={}\n", self.variant));
        s.push_str(&format!("input_size={}\n", self.input_size));
        s.push_str(&format!("in_channels={}\n", self.in_channels));
        s.push_str(&format!("channels={}\n", join_u(&self.channels)));
        s.push_str(&format!("fusion_channels={}\n", self.fusion_channels));
        s.push_str(&format!("strides={}\n", join_u(&self.strides)));
        s.push_str(&format!("anchor_scales={}\n", join_f(&self.anchor_scales)));
        s.push_str(&format!("ratios={}\n", join_f(&self.ratios)));
        s.push_str(&format!("classes={}\n", self.num_classes));
        s.push_str(&format!("head_paths={}\n", paths));
        s.push_str(&format!("deform_head={}\n", self.deform_head));
        s.push_str(&format!("feature_refine={}\n", self.feature_refine));
        s.push_str(&format!("coding_center={}\n", self.coding.center_variance));
        s.push_str(&format!("coding_size={}\n", self.coding.size_variance));
        s.push_str(&format!("clip_refined_anchors={}\n", self.clip_refined_anchors));
        s.push_str(&format!("grad_through_refined_decode={}\n", self.grad_through_refined_decode));
        s
    }

    /// Parses `key=value` lines; unknown keys are rejected with the list of
    /// valid ones. Missing keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<ModelConfig, CheckpointError> {
        let mut cfg = ModelConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<(), CheckpointError> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(CheckpointError::BadLine(lineno + 1))?;
            self.apply_key(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<(), CheckpointError> {
        let bad = |k: &str, msg: &str| CheckpointError::BadValue(k.to_string(), msg.to_string());
        match key {
            "variant" => {
                self.variant = match value {
                    "drnet" => Variant::Drnet,
                    "ssd4s" => Variant::Ssd4s,
                    "rg" => Variant::Rg,
                    "rd" => Variant::Rd,
                    _ => return Err(bad(key, "expected drnet|ssd4s|rg|rd")),
                }
            }
            "input_size" => self.input_size = parse_num(key, value)?,
            "in_channels" => self.in_channels = parse_num(key, value)?,
            "channels" => self.channels = parse_arr4_usize(key, value)?,
            "fusion_channels" => self.fusion_channels = parse_num(key, value)?,
            "strides" => self.strides = parse_arr4_usize(key, value)?,
            "anchor_scales" => self.anchor_scales = parse_arr4_f64(key, value)?,
            "ratios" => {
                self.ratios = value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| bad(key, &e.to_string()))?
            }
            "classes" => self.num_classes = parse_num(key, value)?,
            "head_paths" => {
                let mut paths = Vec::new();
                for part in value.split(',') {
                    let (k, d) = part
                        .trim()
                        .split_once('x')
                        .ok_or_else(|| bad(key, "expected entries like 3x1"))?;
                    paths.push(HeadPath::new(
                        k.parse().map_err(|_| bad(key, "bad kernel"))?,
                        d.parse().map_err(|_| bad(key, "bad dilation"))?,
                    ));
                }
                self.head = MultiHeadConfig::new(paths);
            }
            "deform_head" => self.deform_head = parse_bool(key, value)?,
            "feature_refine" => {
                self.feature_refine = match value {
                    "anchor_offsets" => FeatureRefineMode::FromAnchorOffsets,
                    "features" => FeatureRefineMode::FromFeatures,
                    "off" => FeatureRefineMode::Off,
                    _ => return Err(bad(key, "expected anchor_offsets|features|off")),
                }
            }
            "coding_center" => {
                self.coding =
                    OffsetCoding::new(parse_numf(key, value)?, self.coding.size_variance)
            }
            "coding_size" => {
                self.coding =
                    OffsetCoding::new(self.coding.center_variance, parse_numf(key, value)?)
            }
            "clip_refined_anchors" => self.clip_refined_anchors = parse_bool(key, value)?,
            "grad_through_refined_decode" => {
                self.grad_through_refined_decode = parse_bool(key, value)?
            }
            _ => {
                return Err(CheckpointError::UnknownKey(
                    key.to_string(),
                    CONFIG_KEYS.join(", "),
                ))
            }
        }
        Ok(())
    }
}

fn parse_num(key: &str, value: &str) -> Result<usize, CheckpointError> {
    value
        .parse()
        .map_err(|_| CheckpointError::BadValue(key.to_string(), format!("not an integer: {}", value)))
}

fn parse_numf(key: &str, value: &str) -> Result<f64, CheckpointError> {
    value
        .parse()
        .map_err(|_| CheckpointError::BadValue(key.to_string(), format!("not a number: {}", value)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CheckpointError> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(CheckpointError::BadValue(key.to_string(), format!("not a bool: {}", value))),
    }
}

fn parse_arr4_usize(key: &str, value: &str) -> Result<[usize; 4], CheckpointError> {
    let v: Vec<usize> = value
        .split(',')
        .map(|p| parse_num(key, p.trim()))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| CheckpointError::BadValue(key.to_string(), "expected 4 entries".into()))
}

fn parse_arr4_f64(key: &str, value: &str) -> Result<[f64; 4], CheckpointError> {
    let v: Vec<f64> = value
        .split(',')
        .map(|p| parse_numf(key, p.trim()))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| CheckpointError::BadValue(key.to_string(), "expected 4 entries".into()))
}

/// Writes `{stem}.afw` (weights) and `{stem}.cfg` (config echo plus step
/// counter) into `dir`. Multi-model checkpoints prefix each model's
/// parameter names and config lines.
pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    models: &[(&str, &Model)],
    step: u64,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut cfg = format!("step={}\n", step);
    for (prefix, model) in models {
        for (name, t) in model.params.iter() {
            let full = if prefix.is_empty() {
                name.clone()
            } else {
                format!("{}.{}", prefix, name)
            };
            tensors.push((full, t.clone()));
        }
        for line in model.config.to_kv().lines() {
            if prefix.is_empty() {
                cfg.push_str(line);
            } else {
                cfg.push_str(&format!("{}.{}", prefix, line));
            }
            cfg.push('\n');
        }
    }
    afw::write_tensors(&dir.join(format!("{}.afw", stem)), &tensors)?;
    std::fs::write(dir.join(format!("{}.cfg", stem)), cfg)?;
    Ok(())
}

fn split_cfg(text: &str, prefix: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        let line = line.trim();
        if prefix.is_empty() {
            if !line.starts_with("step=") && !line.contains("..") && !line.is_empty() {
                out.push_str(line);
                out.push('\n');
            }
        } else if let Some(rest) = line.strip_prefix(&format!("{}.", prefix)) {
            out.push_str(rest);
            out.push('\n');
        }
    }
    out
}

fn load_params(
    model: &mut Model,
    tensors: &[(String, Tensor)],
    prefix: &str,
) -> Result<(), CheckpointError> {
    let mut seen = 0usize;
    for (full, t) in tensors {
        let name = if prefix.is_empty() {
            Some(full.as_str())
        } else {
            full.strip_prefix(&format!("{}.", prefix))
        };
        let Some(name) = name else { continue };
        if !model.params.contains(name) {
            return Err(CheckpointError::ParamMismatch(format!(
                "checkpoint tensor {} not in model",
                full
            )));
        }
        let dst = model.params.get_mut(name);
        if dst.shape() != t.shape() {
            return Err(CheckpointError::ParamMismatch(format!(
                "parameter {} has shape {:?}, checkpoint has {:?}",
                name,
                dst.shape(),
                t.shape()
            )));
        }
        *dst = t.clone();
        seen += 1;
    }
    if seen != model.params.len() {
        return Err(CheckpointError::ParamMismatch(format!(
            "model expects {} parameters, checkpoint supplied {}",
            model.params.len(),
            seen
        )));
    }
    Ok(())
}

fn read_step(text: &str) -> u64 {
    text.lines()
        .find_map(|l| l.trim().strip_prefix("step="))
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

pub fn load_model(dir: &Path, stem: &str) -> Result<(Model, u64), CheckpointError> {
    let cfg_text = std::fs::read_to_string(dir.join(format!("{}.cfg", stem)))?;
    let tensors = afw::read_tensors(&dir.join(format!("{}.afw", stem)))?;
    let config = ModelConfig::from_kv(&split_cfg(&cfg_text, ""))?;
    let mut model = Model::build(config, 0);
    load_params(&mut model, &tensors, "")?;
    Ok((model, read_step(&cfg_text)))
}

/// A reference generator and its paired refinement detector.
#[derive(Debug, Clone)]
pub struct TemporalPair {
    pub rg: Model,
    pub rd: Model,
}

/// Builds an RG/RD pair from a base configuration. With `deform_head` the
/// pair propagates both anchor and feature offsets; without it the
/// detector's head is made of traditional convolutions and only anchor
/// offsets cross frames. The two networks never share parameters (their
/// seeds differ).
pub fn build_pair(base: &ModelConfig, seed: u64) -> TemporalPair {
    let mut rg_cfg = base.clone();
    rg_cfg.variant = Variant::Rg;
    rg_cfg.feature_refine = if base.deform_head {
        FeatureRefineMode::FromAnchorOffsets
    } else {
        FeatureRefineMode::Off
    };
    let mut rd_cfg = base.clone();
    rd_cfg.variant = Variant::Rd;
    TemporalPair {
        rg: Model::build(rg_cfg, seed),
        rd: Model::build(rd_cfg, seed.wrapping_add(1)),
    }
}

pub fn save_pair(dir: &Path, stem: &str, pair: &TemporalPair, step: u64) -> Result<(), CheckpointError> {
    save_checkpoint(dir, stem, &[("rg", &pair.rg), ("rd", &pair.rd)], step)
}

pub fn load_pair(dir: &Path, stem: &str) -> Result<(TemporalPair, u64), CheckpointError> {
    let cfg_text = std::fs::read_to_string(dir.join(format!("{}.cfg", stem)))?;
    let tensors = afw::read_tensors(&dir.join(format!("{}.afw", stem)))?;
    let rg_cfg = ModelConfig::from_kv(&split_cfg(&cfg_text, "rg"))?;
    let rd_cfg = ModelConfig::from_kv(&split_cfg(&cfg_text, "rd"))?;
    let mut rg = Model::build(rg_cfg, 0);
    let mut rd = Model::build(rd_cfg, 0);
    load_params(&mut rg, &tensors, "rg")?;
    load_params(&mut rd, &tensors, "rd")?;
    Ok((TemporalPair { rg, rd }, read_step(&cfg_text)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            channels: [3, 4, 5, 5],
            fusion_channels: 4,
            strides: [2, 4, 8, 16],
            anchor_scales: [4.0, 8.0, 12.0, 16.0],
            ratios: vec![1.0, 2.0],
            num_classes: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = Model::build(micro_config(), 7);
        let b = Model::build(micro_config(), 7);
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "parameter {} differs", na);
        }
        let c = Model::build(micro_config(), 8);
        let diff = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(diff, "different seeds should differ");
    }

    #[test]
    fn refinement_heads_start_at_zero() {
        let m = Model::build(micro_config(), 3);
        for (name, t) in m.params.iter() {
            if name.starts_with("arm.") || name.starts_with("fr.") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{} not zero-initialized", name);
            }
        }
    }

    #[test]
    fn forward_output_shapes() {
        let cfg = micro_config();
        let m = Model::build(cfg.clone(), 1);
        let image = Tensor::zeros(vec![1, 1, 16, 16]);
        let pass = m.forward(&image, false);
        assert_eq!(pass.heads.len(), 4);
        let a = cfg.anchors_per_cell();
        for (s, &(h, w)) in cfg.feature_shapes().iter().enumerate() {
            let conf = pass.tape.value(pass.heads[s].conf);
            let loc = pass.tape.value(pass.heads[s].loc);
            assert_eq!(conf.shape(), &[1, (cfg.num_classes + 1) * a, h, w]);
            assert_eq!(loc.shape(), &[1, 4 * a, h, w]);
            let ar = pass.tape.value(pass.ar[s]);
            assert_eq!(ar.shape(), &[1, 4 * a, h, w]);
        }
    }

    #[test]
    fn zero_image_fresh_model_keeps_anchors() {
        let m = Model::build(micro_config(), 5);
        let image = Tensor::zeros(vec![1, 1, 16, 16]);
        let pass = m.forward(&image, false);
        let ar: Vec<Tensor> = pass.ar.iter().map(|&i| pass.tape.value(i).clone()).collect();
        let refined = crate::heads::refined_anchor_boxes(&ar, m.anchors(), &m.config.coding, None);
        assert_eq!(refined, m.anchors().boxes());
    }

    #[test]
    fn checkpoint_roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::build(micro_config(), 11);
        save_checkpoint(dir.path(), "model", &[("", &m)], 42).unwrap();
        let (back, step) = load_model(dir.path(), "model").unwrap();
        assert_eq!(step, 42);
        assert_eq!(back.config, m.config);
        for ((na, ta), (nb, tb)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        let image = Tensor::from_vec(
            vec![1, 1, 16, 16],
            (0..256).map(|v| (v as f64 * 0.7).sin() * 0.5 + 0.5).collect(),
        );
        let p1 = m.forward(&image, false);
        let p2 = back.forward(&image, false);
        for (h1, h2) in p1.heads.iter().zip(&p2.heads) {
            assert_eq!(p1.tape.value(h1.conf).data(), p2.tape.value(h2.conf).data());
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = micro_config();
        let m = Model::build(cfg.clone(), 2);
        // independent count from the architecture description
        let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
        let ch = cfg.channels;
        let f = cfg.fusion_channels;
        let a = cfg.ratios.len();
        let classes = cfg.num_classes + 1;
        let mut want = 0;
        // stem: one downsample per factor of two in the first stride
        let downs = cfg.strides[0].trailing_zeros() as usize;
        for d in 0..downs {
            want += conv(ch[0], if d == 0 { cfg.in_channels } else { ch[0] }, 3);
        }
        want += conv(ch[0], ch[0], 3);
        for s in 1..4 {
            want += conv(ch[s], ch[s - 1], 3) + conv(ch[s], ch[s], 3);
        }
        for s in 0..4 {
            want += conv(f, ch[s], 1) + conv(f, f, 3); // lateral + smooth
            want += conv(4 * a, ch[s], 3); // anchor refinement
        }
        for path in &cfg.head.paths {
            let off = 2 * path.kernel * path.kernel;
            for _s in 0..4 {
                want += conv(off, 4 * a, 1); // offset conv
                want += conv(classes * a, f, path.kernel) + conv(4 * a, f, path.kernel);
            }
        }
        assert_eq!(m.param_count(), want);
    }

    #[test]
    fn config_kv_roundtrip() {
        let mut cfg = micro_config();
        cfg.variant = Variant::Ssd4s;
        cfg.deform_head = false;
        cfg.feature_refine = FeatureRefineMode::Off;
        let text = cfg.to_kv();
        let back = ModelConfig::from_kv(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_config_key_lists_valid_keys() {
        let err = ModelConfig::from_kv("nonsense=1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nonsense") && msg.contains("input_size"), "{}", msg);
    }

    #[test]
    #[should_panic(expected = "strides must double")]
    fn non_dyadic_strides_rejected() {
        let mut cfg = micro_config();
        cfg.strides = [2, 4, 8, 12];
        Model::build(cfg, 0);
    }
}
