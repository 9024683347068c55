//! Bilinear feature sampling and the deformable convolution kernels.
//!
//! Each tap of a deformable convolution reads the input at its regular grid
//! position plus a per-location learned offset, interpolated bilinearly.
//! Offsets are expressed in feature-map cells and laid out channel-wise as
//! (dy_1, dx_1, ..., dy_{k*k}, dx_{k*k}) with the kernel grid row-major.
//! Locations fully outside `[-1, H] x [-1, W]` contribute zero (zero
//! padding beyond the map).

use crate::conv::{conv_extent, ConvGeom};
use crate::tensor::Tensor;

/// Per-path sampling offsets: one (dy, dx) pair per kernel tap per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOffsets {
    data: Tensor,
    kernel: (usize, usize),
}

impl FeatureOffsets {
    pub fn new(data: Tensor, kernel: (usize, usize)) -> Self {
        let (_, c, _, _) = data.dims4();
        assert_eq!(
            c,
            2 * kernel.0 * kernel.1,
            "offset tensor has {} channels, expected {} for a {}x{} kernel",
            c,
            2 * kernel.0 * kernel.1,
            kernel.0,
            kernel.1
        );
        assert!(data.is_finite(), "non-finite values in feature offsets");
        FeatureOffsets { data, kernel }
    }

    pub fn zeros(kernel: (usize, usize), h: usize, w: usize) -> Self {
        FeatureOffsets {
            data: Tensor::zeros(vec![1, 2 * kernel.0 * kernel.1, h, w]),
            kernel,
        }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.kernel
    }
}

#[inline]
fn corner_value(plane: &[f64], h: usize, w: usize, y: i64, x: i64) -> f64 {
    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Bilinear interpolation of one channel plane at a fractional location.
#[inline]
pub(crate) fn sample_plane(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as i64, x0 as i64);
    let v00 = corner_value(plane, h, w, y0, x0);
    let v01 = corner_value(plane, h, w, y0, x0 + 1);
    let v10 = corner_value(plane, h, w, y0 + 1, x0);
    let v11 = corner_value(plane, h, w, y0 + 1, x0 + 1);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

/// Samples every channel of batch item 0 at location (y, x), in feature
/// cells. Out-of-map locations contribute zero.
pub fn bilinear_sample(feature: &Tensor, y: f64, x: f64) -> Vec<f64> {
    let (_, c, h, w) = feature.dims4();
    let data = feature.data();
    (0..c)
        .map(|ch| sample_plane(&data[ch * h * w..(ch + 1) * h * w], h, w, y, x))
        .collect()
}

/// Forward deformable convolution.
///
/// `offsets` has shape [N, 2*kh*kw, OH, OW]; its spatial extents must match
/// the output of the corresponding plain convolution.
pub fn deform_conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    offsets: &Tensor,
    geom: &ConvGeom,
) -> Tensor {
    let (n, ci, h, w) = input.dims4();
    let (co, wci, kh, kw) = weight.dims4();
    assert_eq!(ci, wci, "deform conv input has {} channels but weight expects {}", ci, wci);
    assert_eq!(bias.shape(), &[co], "bias shape {:?} does not match {} output channels", bias.shape(), co);
    let oh = conv_extent(h, geom.padding, geom.dilation, kh, geom.stride);
    let ow = conv_extent(w, geom.padding, geom.dilation, kw, geom.stride);
    let k2 = kh * kw;
    let (on, oc, ooh, oow) = offsets.dims4();
    assert_eq!(
        (on, oc, ooh, oow),
        (n, 2 * k2, oh, ow),
        "offset tensor shape {:?} does not match [{}, {}, {}, {}]",
        offsets.shape(),
        n,
        2 * k2,
        oh,
        ow
    );
    assert!(input.is_finite(), "non-finite values in deform conv input");
    assert!(weight.is_finite(), "non-finite values in deform conv weight");
    assert!(offsets.is_finite(), "non-finite values in deform conv offsets");

    let mut out = Tensor::zeros(vec![n, co, oh, ow]);
    let x = input.data();
    let wt = weight.data();
    let bs = bias.data();
    let off = offsets.data();
    let o = out.data_mut();
    let (s, p, d) = (geom.stride, geom.padding, geom.dilation);

    // sampled[ci * k2 + tap] reused per output cell
    let mut sampled = vec![0.0f64; ci * k2];
    for bn in 0..n {
        let in_base = bn * ci * h * w;
        let off_base = bn * 2 * k2 * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let t = ky * kw + kx;
                        let dy = off[off_base + (2 * t) * oh * ow + oy * ow + ox];
                        let dx = off[off_base + (2 * t + 1) * oh * ow + oy * ow + ox];
                        let sy = (oy * s + ky * d) as f64 - p as f64 + dy;
                        let sx = (ox * s + kx * d) as f64 - p as f64 + dx;
                        for ic in 0..ci {
                            let plane = &x[in_base + ic * h * w..in_base + (ic + 1) * h * w];
                            sampled[ic * k2 + t] = sample_plane(plane, h, w, sy, sx);
                        }
                    }
                }
                for oc in 0..co {
                    let wrow = &wt[oc * ci * k2..(oc + 1) * ci * k2];
                    let mut acc = bs[oc];
                    for (wv, sv) in wrow.iter().zip(&sampled) {
                        acc += wv * sv;
                    }
                    o[((bn * co + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    debug_assert!(out.is_finite(), "deform_conv2d produced non-finite output");
    out
}

/// Gradients of a deformable convolution w.r.t. input, weight, bias and
/// offsets.
pub fn deform_conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    offsets: &Tensor,
    grad_out: &Tensor,
    geom: &ConvGeom,
    need_input: bool,
    need_offsets: bool,
) -> (Option<Tensor>, Tensor, Tensor, Option<Tensor>) {
    let (n, ci, h, w) = input.dims4();
    let (co, _, kh, kw) = weight.dims4();
    let (_, _, oh, ow) = grad_out.dims4();
    let k2 = kh * kw;
    let (s, p, d) = (geom.stride, geom.padding, geom.dilation);

    let mut gw = Tensor::zeros(vec![co, ci, kh, kw]);
    let mut gb = Tensor::zeros(vec![co]);
    let mut gi = need_input.then(|| Tensor::zeros(vec![n, ci, h, w]));
    let mut goff = need_offsets.then(|| Tensor::zeros(offsets.shape().to_vec()));

    let x = input.data();
    let wt = weight.data();
    let off = offsets.data();
    let g = grad_out.data();

    let mut sampled = vec![0.0f64; ci * k2];
    let mut d_sampled = vec![0.0f64; ci * k2];
    for bn in 0..n {
        let in_base = bn * ci * h * w;
        let off_base = bn * 2 * k2 * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                // recompute forward samples for this cell
                for t in 0..k2 {
                    let (ky, kx) = (t / kw, t % kw);
                    let dy = off[off_base + (2 * t) * oh * ow + oy * ow + ox];
                    let dx = off[off_base + (2 * t + 1) * oh * ow + oy * ow + ox];
                    let sy = (oy * s + ky * d) as f64 - p as f64 + dy;
                    let sx = (ox * s + kx * d) as f64 - p as f64 + dx;
                    for ic in 0..ci {
                        let plane = &x[in_base + ic * h * w..in_base + (ic + 1) * h * w];
                        sampled[ic * k2 + t] = sample_plane(plane, h, w, sy, sx);
                    }
                }
                d_sampled.fill(0.0);
                for oc in 0..co {
                    let gv = g[((bn * co + oc) * oh + oy) * ow + ox];
                    gb.data_mut()[oc] += gv;
                    let wrow = &wt[oc * ci * k2..(oc + 1) * ci * k2];
                    let gwrow = &mut gw.data_mut()[oc * ci * k2..(oc + 1) * ci * k2];
                    for i in 0..ci * k2 {
                        gwrow[i] += gv * sampled[i];
                        d_sampled[i] += gv * wrow[i];
                    }
                }
                // push d_sampled through the bilinear reads
                for t in 0..k2 {
                    let (ky, kx) = (t / kw, t % kw);
                    let dy = off[off_base + (2 * t) * oh * ow + oy * ow + ox];
                    let dx = off[off_base + (2 * t + 1) * oh * ow + oy * ow + ox];
                    let sy = (oy * s + ky * d) as f64 - p as f64 + dy;
                    let sx = (ox * s + kx * d) as f64 - p as f64 + dx;
                    let y0f = sy.floor();
                    let x0f = sx.floor();
                    let fy = sy - y0f;
                    let fx = sx - x0f;
                    let (y0, x0) = (y0f as i64, x0f as i64);
                    let mut d_sy = 0.0;
                    let mut d_sx = 0.0;
                    for ic in 0..ci {
                        let ds = d_sampled[ic * k2 + t];
                        if ds == 0.0 && goff.is_none() {
                            continue;
                        }
                        let plane_base = in_base + ic * h * w;
                        let plane = &x[plane_base..plane_base + h * w];
                        let v00 = corner_value(plane, h, w, y0, x0);
                        let v01 = corner_value(plane, h, w, y0, x0 + 1);
                        let v10 = corner_value(plane, h, w, y0 + 1, x0);
                        let v11 = corner_value(plane, h, w, y0 + 1, x0 + 1);
                        d_sy += ds * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
                        d_sx += ds * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                        if let Some(gi) = gi.as_mut() {
                            let gid = gi.data_mut();
                            let mut scatter = |yy: i64, xx: i64, wgt: f64| {
                                if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                                    gid[plane_base + yy as usize * w + xx as usize] += ds * wgt;
                                }
                            };
                            scatter(y0, x0, (1.0 - fy) * (1.0 - fx));
                            scatter(y0, x0 + 1, (1.0 - fy) * fx);
                            scatter(y0 + 1, x0, fy * (1.0 - fx));
                            scatter(y0 + 1, x0 + 1, fy * fx);
                        }
                    }
                    if let Some(goff) = goff.as_mut() {
                        let god = goff.data_mut();
                        god[off_base + (2 * t) * oh * ow + oy * ow + ox] += d_sy;
                        god[off_base + (2 * t + 1) * oh * ow + oy * ow + ox] += d_sx;
                    }
                }
            }
        }
    }
    (gi, gw, gb, goff)
}

/// One row of the sampling-center export: cell coordinates plus the regular
/// and refined center-tap positions mapped to input-image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingCenter {
    pub cell_row: usize,
    pub cell_col: usize,
    pub base_x: f64,
    pub base_y: f64,
    pub refined_x: f64,
    pub refined_y: f64,
}

/// Center-tap sampling locations for a stride-1, same-padded detection head,
/// mapped to image pixels via the scale's stride.
pub fn sampling_centers(offsets: &FeatureOffsets, image_stride: f64) -> Vec<SamplingCenter> {
    let (kh, kw) = offsets.kernel();
    let center_tap = (kh / 2) * kw + (kw / 2);
    let (_, _, h, w) = offsets.data().dims4();
    let data = offsets.data().data();
    let plane = h * w;
    let mut rows = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let dy = data[(2 * center_tap) * plane + i * w + j];
            let dx = data[(2 * center_tap + 1) * plane + i * w + j];
            rows.push(SamplingCenter {
                cell_row: i,
                cell_col: j,
                base_x: (j as f64 + 0.5) * image_stride,
                base_y: (i as f64 + 0.5) * image_stride,
                refined_x: (j as f64 + 0.5 + dx) * image_stride,
                refined_y: (i as f64 + 0.5 + dy) * image_stride,
            });
        }
    }
    rows
}
