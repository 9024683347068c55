//! Axis-aligned boxes, anchor generation, jaccard overlap, and the
//! SSD-style offset coding used by both regression steps.
//!
//! Boxes are stored center-size in input-image pixels; the corner form is
//! derived on demand for overlap computations.

/// Axis-aligned box, center-size form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        assert!(w > 0.0 && h > 0.0, "box extents must be positive, got {}x{}", w, h);
        BBox { cx, cy, w, h }
    }

    /// (x_min, y_min, x_max, y_max)
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clamps the box to `[0, size] x [0, size]`, keeping extents positive.
    pub fn clipped_to(&self, size: f64) -> Self {
        let (x0, y0, x1, y1) = self.corners();
        let x0 = x0.clamp(0.0, size);
        let y0 = y0.clamp(0.0, size);
        let x1 = x1.clamp(0.0, size);
        let y1 = y1.clamp(0.0, size);
        let w = (x1 - x0).max(1e-6);
        let h = (y1 - y0).max(1e-6);
        let cx = (0.5 * (x0 + x1)).clamp(0.5 * w, size - 0.5 * w);
        let cy = (0.5 * (y0 + y1)).clamp(0.5 * h, size - 0.5 * h);
        BBox::new(cx, cy, w, h)
    }
}

/// Intersection-over-union on the corner representation.
///
/// Areas are derived from the same corners as the intersection so that
/// identical boxes overlap by exactly 1.
pub fn jaccard(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Center and size variances of the offset coding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetCoding {
    pub center_variance: f64,
    pub size_variance: f64,
}

impl OffsetCoding {
    pub fn new(center_variance: f64, size_variance: f64) -> Self {
        assert!(
            center_variance > 0.0 && size_variance > 0.0,
            "coding variances must be positive"
        );
        OffsetCoding {
            center_variance,
            size_variance,
        }
    }
}

impl Default for OffsetCoding {
    fn default() -> Self {
        // SSD convention; the decoding operation is cited without constants.
        OffsetCoding::new(0.1, 0.2)
    }
}

/// Log-space extents are clamped to this magnitude before exponentiation so
/// untrained heads cannot overflow the decode.
pub const LOG_EXTENT_CLAMP: f64 = 10.0;

/// Offsets of `gt` relative to `anchor` in coding units (t_x, t_y, t_w, t_h).
pub fn encode(gt: &BBox, anchor: &BBox, coding: &OffsetCoding) -> [f64; 4] {
    [
        (gt.cx - anchor.cx) / (anchor.w * coding.center_variance),
        (gt.cy - anchor.cy) / (anchor.h * coding.center_variance),
        (gt.w / anchor.w).ln() / coding.size_variance,
        (gt.h / anchor.h).ln() / coding.size_variance,
    ]
}

/// Exact inverse of [`encode`] up to the log-extent clamp.
pub fn decode(offsets: &[f64; 4], anchor: &BBox, coding: &OffsetCoding) -> BBox {
    let lw = (offsets[2] * coding.size_variance).clamp(-LOG_EXTENT_CLAMP, LOG_EXTENT_CLAMP);
    let lh = (offsets[3] * coding.size_variance).clamp(-LOG_EXTENT_CLAMP, LOG_EXTENT_CLAMP);
    BBox::new(
        anchor.cx + offsets[0] * anchor.w * coding.center_variance,
        anchor.cy + offsets[1] * anchor.h * coding.center_variance,
        anchor.w * lw.exp(),
        anchor.h * lh.exp(),
    )
}

/// Per-scale slice of an anchor set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLayout {
    /// Feature rows at this scale.
    pub h: usize,
    /// Feature columns at this scale.
    pub w: usize,
    /// Anchors tiled per cell.
    pub anchors_per_cell: usize,
    /// Index of this scale's first anchor in the flat array.
    pub start: usize,
}

impl ScaleLayout {
    pub fn count(&self) -> usize {
        self.h * self.w * self.anchors_per_cell
    }

    /// Flat anchor index of slot `a` at cell (i, j), relative to the whole set.
    #[inline]
    pub fn anchor_index(&self, i: usize, j: usize, a: usize) -> usize {
        self.start + (i * self.w + j) * self.anchors_per_cell + a
    }
}

/// Flat anchor array with per-scale layout bookkeeping.
///
/// Ordering is level-major, then row-major over cells, then ratio slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    boxes: Vec<BBox>,
    layouts: Vec<ScaleLayout>,
}

impl BoxSet {
    pub fn new(boxes: Vec<BBox>, layouts: Vec<ScaleLayout>) -> Self {
        let total: usize = layouts.iter().map(ScaleLayout::count).sum();
        assert_eq!(
            total,
            boxes.len(),
            "per-scale layouts cover {} anchors but {} boxes given",
            total,
            boxes.len()
        );
        BoxSet { boxes, layouts }
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn layouts(&self) -> &[ScaleLayout] {
        &self.layouts
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn get(&self, idx: usize) -> &BBox {
        &self.boxes[idx]
    }

    /// Boxes belonging to scale `l`.
    pub fn scale_boxes(&self, l: usize) -> &[BBox] {
        let lay = &self.layouts[l];
        &self.boxes[lay.start..lay.start + lay.count()]
    }
}

/// Tiles anchors over the given feature shapes.
///
/// The anchor for ratio `r` at cell (i, j) of level `l` is centered at
/// `((j + 0.5) * stride_l, (i + 0.5) * stride_l)` with extents
/// `w = scale_l * sqrt(r)`, `h = scale_l / sqrt(r)`.
pub fn generate_anchors(
    feature_shapes: &[(usize, usize)],
    strides: &[usize],
    scales: &[f64],
    ratios: &[f64],
) -> BoxSet {
    assert_eq!(feature_shapes.len(), strides.len(), "one stride per feature level");
    assert_eq!(feature_shapes.len(), scales.len(), "one anchor scale per feature level");
    assert!(!ratios.is_empty(), "ratios must be non-empty");

    let mut boxes = Vec::new();
    let mut layouts = Vec::new();
    for (l, &(h, w)) in feature_shapes.iter().enumerate() {
        assert!(h > 0 && w > 0, "zero-sized feature map at level {}", l);
        let stride = strides[l] as f64;
        let scale = scales[l];
        layouts.push(ScaleLayout {
            h,
            w,
            anchors_per_cell: ratios.len(),
            start: boxes.len(),
        });
        for i in 0..h {
            for j in 0..w {
                let cx = (j as f64 + 0.5) * stride;
                let cy = (i as f64 + 0.5) * stride;
                for &r in ratios {
                    let rs = r.sqrt();
                    boxes.push(BBox::new(cx, cy, scale * rs, scale / rs));
                }
            }
        }
    }
    BoxSet::new(boxes, layouts)
}
