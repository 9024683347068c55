//! Direct 2-d cross-correlation kernels shared by the tape ops.
//!
//! Loops are ordered so the innermost accumulation runs over contiguous
//! rows; padding is realized by restricting each tap's valid output range
//! instead of branching per element.

use crate::tensor::Tensor;

/// Output extent for one spatial dimension.
pub fn conv_extent(input: usize, padding: usize, dilation: usize, kernel: usize, stride: usize) -> usize {
    let span = input as i64 + 2 * padding as i64 - dilation as i64 * (kernel as i64 - 1) - 1;
    assert!(
        span >= 0,
        "kernel footprint exceeds padded input ({} vs k={} d={} p={})",
        input,
        kernel,
        dilation,
        padding
    );
    (span / stride as i64) as usize + 1
}

/// Output positions `o` in `[0, out)` with `o*stride + tap_offset` inside `[0, input)`.
#[inline]
fn valid_range(input: usize, out: usize, stride: usize, tap_offset: i64) -> (usize, usize) {
    let s = stride as i64;
    let lo = if tap_offset >= 0 { 0 } else { (-tap_offset + s - 1) / s };
    let hi = ((input as i64 - 1 - tap_offset).div_euclid(s) + 1).clamp(0, out as i64);
    let lo = lo.clamp(0, out as i64);
    (lo as usize, hi.max(lo) as usize)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

fn check_conv_shapes(input: &Tensor, weight: &Tensor, bias: &Tensor) {
    let (_, ci, _, _) = input.dims4();
    let (_, wci, _, _) = weight.dims4();
    assert_eq!(
        ci, wci,
        "conv input has {} channels but weight expects {}",
        ci, wci
    );
    assert_eq!(
        bias.shape(),
        &[weight.dim(0)],
        "bias shape {:?} does not match {} output channels",
        bias.shape(),
        weight.dim(0)
    );
    assert!(input.is_finite(), "non-finite values in conv input");
    assert!(weight.is_finite(), "non-finite values in conv weight");
    assert!(bias.is_finite(), "non-finite values in conv bias");
}

pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, geom: &ConvGeom) -> Tensor {
    assert!(geom.dilation >= 1, "dilation must be >= 1");
    assert!(geom.stride >= 1, "stride must be >= 1");
    check_conv_shapes(input, weight, bias);
    let (n, ci, h, w) = input.dims4();
    let (co, _, kh, kw) = weight.dims4();
    let oh = conv_extent(h, geom.padding, geom.dilation, kh, geom.stride);
    let ow = conv_extent(w, geom.padding, geom.dilation, kw, geom.stride);

    let mut out = Tensor::zeros(vec![n, co, oh, ow]);
    let x = input.data();
    let wt = weight.data();
    let bs = bias.data();
    let o = out.data_mut();
    let (s, p, d) = (geom.stride, geom.padding, geom.dilation);

    for bn in 0..n {
        for oc in 0..co {
            let out_plane = &mut o[((bn * co + oc) * oh) * ow..((bn * co + oc) * oh + oh) * ow];
            out_plane.fill(bs[oc]);
            for ic in 0..ci {
                let in_plane = &x[((bn * ci + ic) * h) * w..((bn * ci + ic) * h + h) * w];
                for ky in 0..kh {
                    let ty = (ky * d) as i64 - p as i64;
                    let (oy_lo, oy_hi) = valid_range(h, oh, s, ty);
                    for kx in 0..kw {
                        let tx = (kx * d) as i64 - p as i64;
                        let (ox_lo, ox_hi) = valid_range(w, ow, s, tx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wv = wt[((oc * ci + ic) * kh + ky) * kw + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = (oy as i64 * s as i64 + ty) as usize;
                            let out_row = &mut out_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                            if s == 1 {
                                let ix0 = (ox_lo as i64 + tx) as usize;
                                let in_row = &in_plane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                                for (ov, iv) in out_row.iter_mut().zip(in_row) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for (k, ov) in out_row.iter_mut().enumerate() {
                                    let ix = ((ox_lo + k) as i64 * s as i64 + tx) as usize;
                                    *ov += wv * in_plane[iy * w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    debug_assert!(out.is_finite(), "conv2d produced non-finite output");
    out
}

/// Gradients of a conv2d w.r.t. its inputs. `grad_input` is skipped when not
/// needed (e.g. the first layer reading an image leaf).
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geom: &ConvGeom,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, ci, h, w) = input.dims4();
    let (co, _, kh, kw) = weight.dims4();
    let (_, _, oh, ow) = grad_out.dims4();
    let (s, p, d) = (geom.stride, geom.padding, geom.dilation);

    let mut gw = Tensor::zeros(vec![co, ci, kh, kw]);
    let mut gb = Tensor::zeros(vec![co]);
    let mut gi = if need_input {
        Some(Tensor::zeros(vec![n, ci, h, w]))
    } else {
        None
    };

    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();

    for bn in 0..n {
        for oc in 0..co {
            let g_plane = &g[((bn * co + oc) * oh) * ow..((bn * co + oc) * oh + oh) * ow];
            gb.data_mut()[oc] += g_plane.iter().sum::<f64>();
            for ic in 0..ci {
                let in_base = ((bn * ci + ic) * h) * w;
                let in_plane = &x[in_base..in_base + h * w];
                for ky in 0..kh {
                    let ty = (ky * d) as i64 - p as i64;
                    let (oy_lo, oy_hi) = valid_range(h, oh, s, ty);
                    for kx in 0..kw {
                        let tx = (kx * d) as i64 - p as i64;
                        let (ox_lo, ox_hi) = valid_range(w, ow, s, tx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let widx = ((oc * ci + ic) * kh + ky) * kw + kx;
                        let wv = wt[widx];
                        let mut wacc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy as i64 * s as i64 + ty) as usize;
                            let g_row = &g_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                            if s == 1 {
                                let ix0 = (ox_lo as i64 + tx) as usize;
                                let in_row = &in_plane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                                for (gv, iv) in g_row.iter().zip(in_row) {
                                    wacc += gv * iv;
                                }
                                if let Some(gi) = gi.as_mut() {
                                    let gi_row = &mut gi.data_mut()
                                        [in_base + iy * w + ix0..in_base + iy * w + ix0 + (ox_hi - ox_lo)];
                                    for (giv, gv) in gi_row.iter_mut().zip(g_row) {
                                        *giv += wv * gv;
                                    }
                                }
                            } else {
                                for (k, gv) in g_row.iter().enumerate() {
                                    let ix = ((ox_lo + k) as i64 * s as i64 + tx) as usize;
                                    wacc += gv * in_plane[iy * w + ix];
                                    if let Some(gi) = gi.as_mut() {
                                        gi.data_mut()[in_base + iy * w + ix] += wv * gv;
                                    }
                                }
                            }
                        }
                        gw.data_mut()[widx] += wacc;
                    }
                }
            }
        }
    }
    (gi, gw, gb)
}
