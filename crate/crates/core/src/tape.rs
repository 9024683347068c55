//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Ops append
//! nodes; inputs therefore always precede outputs, so walking the node list
//! in reverse is a reverse topological traversal. The tape is discarded
//! after `backward`; graphs are never reused.
//!
//! Broadcasting is deliberately restricted to scalar-with-tensor
//! ([`Tape::scale`]) and same-shape binary ops.

use crate::boxes::{BBox, OffsetCoding, LOG_EXTENT_CLAMP};
use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::sampling::{deform_conv2d_backward, deform_conv2d_forward};
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        geom: ConvGeom,
    },
    DeformConv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        offsets: TensorId,
        geom: ConvGeom,
    },
    UpsampleNearest2x(TensorId),
    MaxPool2x(TensorId),
    SoftmaxChannel(TensorId),
    SmoothL1(TensorId),
    Gather {
        input: TensorId,
        indices: Vec<usize>,
    },
    Reshape(TensorId),
    Sum(TensorId),
    CrossEntropy {
        logits: TensorId,
        classes: Vec<usize>,
    },
    /// Rows of anchor offsets decoded against fixed anchors: [K,4] -> [K,4]
    /// boxes in center-size form.
    DecodeRows {
        offsets: TensorId,
        anchors: Vec<BBox>,
        coding: OffsetCoding,
    },
    /// Fixed ground-truth boxes encoded against rows of anchor boxes:
    /// [K,4] anchor rows -> [K,4] offsets.
    EncodeRows {
        anchor_rows: TensorId,
        gts: Vec<BBox>,
        coding: OffsetCoding,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Only leaves with `requires_grad` receive
    /// gradients after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` w.r.t. tensor `id`, if one was
    /// produced.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Smallest distance of any recorded value to a derivative kink: relu
    /// inputs to zero, and deformable sampling offsets to integer grid
    /// lines. Finite-difference probes must keep clear of these.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &v in self.nodes[a.0].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::DeformConv2d { offsets, .. } => {
                    for &v in self.nodes[offsets.0].value.data() {
                        let f = v.rem_euclid(1.0);
                        margin = margin.min(f.min(1.0 - f));
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> TensorId {
        let requires = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::UpsampleNearest2x(a)
            | Op::MaxPool2x(a)
            | Op::SoftmaxChannel(a)
            | Op::SmoothL1(a)
            | Op::Reshape(a)
            | Op::Sum(a) => self.requires_grad(*a),
            Op::Gather { input, .. } => self.requires_grad(*input),
            Op::CrossEntropy { logits, .. } => self.requires_grad(*logits),
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                self.requires_grad(*input) || self.requires_grad(*weight) || self.requires_grad(*bias)
            }
            Op::DeformConv2d {
                input,
                weight,
                bias,
                offsets,
                ..
            } => {
                self.requires_grad(*input)
                    || self.requires_grad(*weight)
                    || self.requires_grad(*bias)
                    || self.requires_grad(*offsets)
            }
            Op::DecodeRows { offsets, .. } => self.requires_grad(*offsets),
            Op::EncodeRows { anchor_rows, .. } => self.requires_grad(*anchor_rows),
        };
        self.push(value, requires, op)
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{} requires matching shapes",
            what
        );
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape(a, b, "add");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op(Tensor::from_vec(shape, data), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape(a, b, "sub");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op(Tensor::from_vec(shape, data), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape(a, b, "mul");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op(Tensor::from_vec(shape, data), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        assert!(c.is_finite(), "scale factor must be finite");
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op(Tensor::from_vec(shape, data), Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op(Tensor::from_vec(shape, data), Op::Relu(a))
    }

    /// Elementwise smooth-L1: `0.5*d*d` for |d| < 1, else `|d| - 0.5`.
    pub fn smooth_l1(&mut self, a: TensorId) -> TensorId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&d| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 })
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_op(Tensor::from_vec(shape, data), Op::SmoothL1(a))
    }

    // ── Convolutions ────────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> TensorId {
        let geom = ConvGeom { stride, padding, dilation };
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias), &geom);
        self.push_op(out, Op::Conv2d { input, weight, bias, geom })
    }

    pub fn deform_conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        offsets: TensorId,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> TensorId {
        let geom = ConvGeom { stride, padding, dilation };
        let out = deform_conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            self.value(offsets),
            &geom,
        );
        self.push_op(
            out,
            Op::DeformConv2d { input, weight, bias, offsets, geom },
        )
    }

    // ── Spatial resampling ──────────────────────────────────────────────

    pub fn upsample_nearest2x(&mut self, a: TensorId) -> TensorId {
        let (n, c, h, w) = self.value(a).dims4();
        let src = self.value(a).data();
        let mut out = Tensor::zeros(vec![n, c, 2 * h, 2 * w]);
        let dst = out.data_mut();
        for plane in 0..n * c {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            let dp = &mut dst[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dp[y * 2 * w + x] = sp[(y / 2) * w + x / 2];
                }
            }
        }
        self.push_op(out, Op::UpsampleNearest2x(a))
    }

    /// 2x2 max pooling with stride 2; spatial extents must be even.
    pub fn max_pool2x(&mut self, a: TensorId) -> TensorId {
        let (n, c, h, w) = self.value(a).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2x needs even extents, got {}x{}", h, w);
        let src = self.value(a).data();
        let mut out = Tensor::zeros(vec![n, c, h / 2, w / 2]);
        let dst = out.data_mut();
        for plane in 0..n * c {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            let dp = &mut dst[plane * (h / 2) * (w / 2)..(plane + 1) * (h / 2) * (w / 2)];
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let m = sp[2 * y * w + 2 * x]
                        .max(sp[2 * y * w + 2 * x + 1])
                        .max(sp[(2 * y + 1) * w + 2 * x])
                        .max(sp[(2 * y + 1) * w + 2 * x + 1]);
                    dp[y * (w / 2) + x] = m;
                }
            }
        }
        self.push_op(out, Op::MaxPool2x(a))
    }

    // ── Normalization and losses ────────────────────────────────────────

    /// Softmax across the channel dimension of an [N,C,H,W] tensor.
    pub fn softmax_channel(&mut self, a: TensorId) -> TensorId {
        let (n, c, h, w) = self.value(a).dims4();
        let src = self.value(a).data();
        let mut out = Tensor::zeros(vec![n, c, h, w]);
        let dst = out.data_mut();
        let plane = h * w;
        for bn in 0..n {
            for pix in 0..plane {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(src[(bn * c + ch) * plane + pix]);
                }
                let mut denom = 0.0;
                for ch in 0..c {
                    denom += (src[(bn * c + ch) * plane + pix] - mx).exp();
                }
                for ch in 0..c {
                    dst[(bn * c + ch) * plane + pix] =
                        (src[(bn * c + ch) * plane + pix] - mx).exp() / denom;
                }
            }
        }
        self.push_op(out, Op::SoftmaxChannel(a))
    }

    /// Picks flat elements of `input` in the given order; output is 1-d.
    pub fn gather(&mut self, input: TensorId, indices: Vec<usize>) -> TensorId {
        let src = self.value(input);
        let n = src.numel();
        for &i in &indices {
            assert!(i < n, "gather index {} out of range for {} elements", i, n);
        }
        let data: Vec<f64> = indices.iter().map(|&i| src.data()[i]).collect();
        let len = data.len();
        self.push_op(
            Tensor::from_vec(vec![len], data),
            Op::Gather { input, indices },
        )
    }

    pub fn reshape(&mut self, input: TensorId, shape: Vec<usize>) -> TensorId {
        let src = self.value(input);
        assert_eq!(
            src.numel(),
            shape.iter().product::<usize>(),
            "reshape from {:?} to {:?} changes element count",
            src.shape(),
            shape
        );
        let data = src.data().to_vec();
        self.push_op(Tensor::from_vec(shape, data), Op::Reshape(input))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(total), Op::Sum(a))
    }

    /// Summed cross-entropy over rows of raw logits.
    ///
    /// `logits` is [K, M] (or 1-d, treated as a single row); `classes` gives
    /// the target index per row.
    pub fn cross_entropy(&mut self, logits: TensorId, classes: Vec<usize>) -> TensorId {
        let v = self.value(logits);
        let (rows, cols) = match v.shape() {
            [m] => (1usize, *m),
            [k, m] => (*k, *m),
            s => panic!("cross_entropy expects 1-d or 2-d logits, got {:?}", s),
        };
        assert_eq!(classes.len(), rows, "one class index per logit row");
        for &c in &classes {
            assert!(c < cols, "class index {} out of range for {} classes", c, cols);
        }
        let mut total = 0.0;
        for (k, &cls) in classes.iter().enumerate() {
            let row = &v.data()[k * cols..(k + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln();
            total += lse - row[cls];
        }
        self.push_op(Tensor::scalar(total), Op::CrossEntropy { logits, classes })
    }

    // ── Box coding (used by the differentiable second-step toggle) ──────

    /// Decodes rows of offsets [K,4] against per-row fixed anchors into
    /// center-size boxes [K,4].
    pub fn decode_rows(
        &mut self,
        offsets: TensorId,
        anchors: Vec<BBox>,
        coding: OffsetCoding,
    ) -> TensorId {
        let v = self.value(offsets);
        assert_eq!(
            v.shape(),
            &[anchors.len(), 4],
            "decode_rows expects [K,4] offsets matching {} anchors",
            anchors.len()
        );
        let mut data = Vec::with_capacity(anchors.len() * 4);
        for (k, a) in anchors.iter().enumerate() {
            let t = &v.data()[k * 4..(k + 1) * 4];
            let b = crate::boxes::decode(&[t[0], t[1], t[2], t[3]], a, &coding);
            data.extend_from_slice(&[b.cx, b.cy, b.w, b.h]);
        }
        let k = anchors.len();
        self.push_op(
            Tensor::from_vec(vec![k, 4], data),
            Op::DecodeRows { offsets, anchors, coding },
        )
    }

    /// Encodes fixed ground-truth boxes against rows of anchor boxes [K,4]
    /// (center-size), producing offsets [K,4].
    pub fn encode_rows(
        &mut self,
        anchor_rows: TensorId,
        gts: Vec<BBox>,
        coding: OffsetCoding,
    ) -> TensorId {
        let v = self.value(anchor_rows);
        assert_eq!(
            v.shape(),
            &[gts.len(), 4],
            "encode_rows expects [K,4] anchor rows matching {} ground truths",
            gts.len()
        );
        let mut data = Vec::with_capacity(gts.len() * 4);
        for (k, g) in gts.iter().enumerate() {
            let r = &v.data()[k * 4..(k + 1) * 4];
            assert!(r[2] > 0.0 && r[3] > 0.0, "anchor row {} has non-positive extents", k);
            let a = BBox::new(r[0], r[1], r[2], r[3]);
            data.extend_from_slice(&crate::boxes::encode(g, &a, &coding));
        }
        let k = gts.len();
        self.push_op(
            Tensor::from_vec(vec![k, 4], data),
            Op::EncodeRows { anchor_rows, gts, coding },
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populates gradients of every `requires_grad` leaf reachable from
    /// `loss`. `loss` must be scalar and the tape non-empty.
    pub fn backward(&mut self, loss: TensorId) {
        assert!(!self.nodes.is_empty(), "backward on an empty tape");
        assert!(
            self.nodes[loss.0].value.is_scalar(),
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.is_none() || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = node.grad.as_ref().unwrap();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(before, *a, g);
                    accumulate(before, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(before, *a, g);
                    accumulate_scaled(before, *b, g, -1.0);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = g.iter().zip(before[b.0].value.data()).map(|(gv, bv)| gv * bv).collect();
                    let gb: Vec<f64> = g.iter().zip(before[a.0].value.data()).map(|(gv, av)| gv * av).collect();
                    accumulate(before, *a, &ga);
                    accumulate(before, *b, &gb);
                }
                Op::Scale(a, c) => {
                    accumulate_scaled(before, *a, g, *c);
                }
                Op::Relu(a) => {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(before[a.0].value.data())
                        .map(|(gv, av)| if *av > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(before, *a, &contrib);
                }
                Op::SmoothL1(a) => {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(before[a.0].value.data())
                        .map(|(gv, &d)| gv * if d.abs() < 1.0 { d } else { d.signum() })
                        .collect();
                    accumulate(before, *a, &contrib);
                }
                Op::Conv2d { input, weight, bias, geom } => {
                    let need_input = before[input.0].requires_grad;
                    let g_t = Tensor::from_vec(node.value.shape().to_vec(), g.clone());
                    let (gi, gw, gb) = conv2d_backward(
                        &before[input.0].value,
                        &before[weight.0].value,
                        &g_t,
                        geom,
                        need_input,
                    );
                    if let Some(gi) = gi {
                        accumulate(before, *input, gi.data());
                    }
                    accumulate(before, *weight, gw.data());
                    accumulate(before, *bias, gb.data());
                }
                Op::DeformConv2d { input, weight, bias, offsets, geom } => {
                    let need_input = before[input.0].requires_grad;
                    let need_offsets = before[offsets.0].requires_grad;
                    let g_t = Tensor::from_vec(node.value.shape().to_vec(), g.clone());
                    let (gi, gw, gb, goff) = deform_conv2d_backward(
                        &before[input.0].value,
                        &before[weight.0].value,
                        &before[offsets.0].value,
                        &g_t,
                        geom,
                        need_input,
                        need_offsets,
                    );
                    if let Some(gi) = gi {
                        accumulate(before, *input, gi.data());
                    }
                    accumulate(before, *weight, gw.data());
                    accumulate(before, *bias, gb.data());
                    if let Some(goff) = goff {
                        accumulate(before, *offsets, goff.data());
                    }
                }
                Op::UpsampleNearest2x(a) => {
                    let (n, c, h, w) = before[a.0].value.dims4();
                    let mut contrib = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        let gp = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let cp = &mut contrib[plane * h * w..(plane + 1) * h * w];
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                cp[(y / 2) * w + x / 2] += gp[y * 2 * w + x];
                            }
                        }
                    }
                    accumulate(before, *a, &contrib);
                }
                Op::MaxPool2x(a) => {
                    let (n, c, h, w) = before[a.0].value.dims4();
                    let src = before[a.0].value.data();
                    let mut contrib = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        let sp = &src[plane * h * w..(plane + 1) * h * w];
                        let gp = &g[plane * (h / 2) * (w / 2)..(plane + 1) * (h / 2) * (w / 2)];
                        for y in 0..h / 2 {
                            for x in 0..w / 2 {
                                // first maximum in scan order wins ties
                                let cands = [
                                    (2 * y * w + 2 * x),
                                    (2 * y * w + 2 * x + 1),
                                    ((2 * y + 1) * w + 2 * x),
                                    ((2 * y + 1) * w + 2 * x + 1),
                                ];
                                let mut best = cands[0];
                                for &cand in &cands[1..] {
                                    if sp[cand] > sp[best] {
                                        best = cand;
                                    }
                                }
                                contrib[plane * h * w + best] += gp[y * (w / 2) + x];
                            }
                        }
                    }
                    accumulate(before, *a, &contrib);
                }
                Op::SoftmaxChannel(a) => {
                    let (n, c, h, w) = node.value.dims4();
                    let s = node.value.data();
                    let plane = h * w;
                    let mut contrib = vec![0.0; n * c * plane];
                    for bn in 0..n {
                        for pix in 0..plane {
                            let mut dot = 0.0;
                            for ch in 0..c {
                                let idx = (bn * c + ch) * plane + pix;
                                dot += g[idx] * s[idx];
                            }
                            for ch in 0..c {
                                let idx = (bn * c + ch) * plane + pix;
                                contrib[idx] = s[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    accumulate(before, *a, &contrib);
                }
                Op::Gather { input, indices } => {
                    let mut contrib = vec![0.0; before[input.0].value.numel()];
                    for (k, &idx) in indices.iter().enumerate() {
                        contrib[idx] += g[k];
                    }
                    accumulate(before, *input, &contrib);
                }
                Op::Reshape(a) => {
                    accumulate(before, *a, g);
                }
                Op::Sum(a) => {
                    let gv = g[0];
                    let contrib = vec![gv; before[a.0].value.numel()];
                    accumulate(before, *a, &contrib);
                }
                Op::CrossEntropy { logits, classes } => {
                    let v = &before[logits.0].value;
                    let cols = *v.shape().last().unwrap();
                    let gv = g[0];
                    let mut contrib = vec![0.0; v.numel()];
                    for (k, &cls) in classes.iter().enumerate() {
                        let row = &v.data()[k * cols..(k + 1) * cols];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&l| (l - mx).exp()).sum();
                        for j in 0..cols {
                            let soft = (row[j] - mx).exp() / denom;
                            contrib[k * cols + j] = gv * (soft - if j == cls { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(before, *logits, &contrib);
                }
                Op::DecodeRows { offsets, anchors, coding } => {
                    let v = &before[offsets.0].value;
                    let mut contrib = vec![0.0; v.numel()];
                    for (k, a) in anchors.iter().enumerate() {
                        let t = &v.data()[k * 4..(k + 1) * 4];
                        contrib[k * 4] = g[k * 4] * a.w * coding.center_variance;
                        contrib[k * 4 + 1] = g[k * 4 + 1] * a.h * coding.center_variance;
                        for (c, dim) in [(2usize, a.w), (3usize, a.h)] {
                            let le = t[c] * coding.size_variance;
                            let inside = le.abs() <= LOG_EXTENT_CLAMP;
                            let slope = if inside {
                                dim * le.exp() * coding.size_variance
                            } else {
                                0.0
                            };
                            contrib[k * 4 + c] = g[k * 4 + c] * slope;
                        }
                    }
                    accumulate(before, *offsets, &contrib);
                }
                Op::EncodeRows { anchor_rows, gts, coding } => {
                    let v = &before[anchor_rows.0].value;
                    let mut contrib = vec![0.0; v.numel()];
                    for (k, gt) in gts.iter().enumerate() {
                        let r = &v.data()[k * 4..(k + 1) * 4];
                        let (acx, acy, aw, ah) = (r[0], r[1], r[2], r[3]);
                        // t_x = (g.cx - a.cx) / (a.w * vc)
                        contrib[k * 4] += g[k * 4] * (-1.0 / (aw * coding.center_variance));
                        contrib[k * 4 + 2] +=
                            g[k * 4] * (-(gt.cx - acx) / (aw * aw * coding.center_variance));
                        contrib[k * 4 + 1] += g[k * 4 + 1] * (-1.0 / (ah * coding.center_variance));
                        contrib[k * 4 + 3] +=
                            g[k * 4 + 1] * (-(gt.cy - acy) / (ah * ah * coding.center_variance));
                        // t_w = ln(g.w / a.w) / vs
                        contrib[k * 4 + 2] += g[k * 4 + 2] * (-1.0 / (aw * coding.size_variance));
                        contrib[k * 4 + 3] += g[k * 4 + 3] * (-1.0 / (ah * coding.size_variance));
                    }
                    accumulate(before, *anchor_rows, &contrib);
                }
            }
        }
    }
}

fn accumulate(nodes: &mut [Node], id: TensorId, contrib: &[f64]) {
    let node = &mut nodes[id.0];
    if !node.requires_grad {
        return;
    }
    match node.grad.as_mut() {
        Some(grad) => {
            for (gv, cv) in grad.iter_mut().zip(contrib) {
                *gv += cv;
            }
        }
        None => node.grad = Some(contrib.to_vec()),
    }
}

fn accumulate_scaled(nodes: &mut [Node], id: TensorId, contrib: &[f64], factor: f64) {
    let node = &mut nodes[id.0];
    if !node.requires_grad {
        return;
    }
    let grad = node
        .grad
        .get_or_insert_with(|| vec![0.0; contrib.len()]);
    for (gv, cv) in grad.iter_mut().zip(contrib) {
        *gv += factor * cv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x);
        let loss = tape.sum(sq);
        assert_eq!(tape.value(loss).item(), 14.0);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_leaf_gets_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]), true);
        let c = tape.leaf(Tensor::from_vec(vec![2], vec![3.0, 4.0]), false);
        let y = tape.mul(x, c);
        let loss = tape.sum(y);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]), true);
        tape.backward(x);
    }

    #[test]
    fn smooth_l1_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![0.5, 2.0]), true);
        let y = tape.smooth_l1(x);
        assert_eq!(tape.value(y).data(), &[0.125, 1.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![0.0, 0.0]), true);
        let loss = tape.cross_entropy(x, vec![0]);
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_and_scatter_back() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]), true);
        let picked = tape.gather(x, vec![2, 2, 0]);
        assert_eq!(tape.value(picked).data(), &[3.0, 3.0, 1.0]);
        let loss = tape.sum(picked);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn upsample_doubles_extents() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 1, 1, 2], vec![1.0, 2.0]), true);
        let y = tape.upsample_nearest2x(x);
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 4]);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let loss = tape.sum(y);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(
                Tensor::from_vec(vec![1, 1, 4, 4], (0..16).map(|v| (v as f64).sin()).collect()),
                false,
            );
            let w = tape.leaf(
                Tensor::from_vec(vec![2, 1, 3, 3], (0..18).map(|v| (v as f64).cos()).collect()),
                false,
            );
            let b = tape.leaf(Tensor::from_vec(vec![2], vec![0.1, -0.2]), false);
            let y = tape.conv2d(x, w, b, 1, 1, 1);
            let s = tape.softmax_channel(y);
            tape.value(s).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "repeated forward runs must be bit-identical");
    }
}
