//! Array kernels behind the graph ops: convolution, trilinear resampling,
//! softmax. Pure functions over row-major f64 slices; every loop has a
//! fixed sequential reduction order so results are bitwise reproducible.

use super::{Padding, Result, TensorError};

/// Output size and leading pad for one spatial axis of a convolution.
pub(crate) fn conv_axis(
    op: &'static str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(TensorError::ZeroStride);
    }
    match padding {
        Padding::Same => {
            if kernel % 2 == 0 {
                return Err(TensorError::EvenKernelSamePadding {
                    op,
                    kernel: vec![kernel],
                });
            }
            let out = input.div_ceil(stride);
            let pad_total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, pad_total / 2))
        }
        Padding::Valid => {
            if kernel > input {
                return Err(TensorError::KernelTooLarge {
                    op,
                    kernel: vec![kernel],
                    input: vec![input],
                });
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

/// Range of output positions whose input index `o*stride + k - pad` lands
/// inside `[0, in_len)`; `None` when empty.
#[inline]
fn out_range(
    k: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> Option<(usize, usize)> {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let max_i = in_len - 1 + pad;
    if max_i < k {
        return None;
    }
    let hi = ((max_i - k) / stride).min(out_len - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let out_plane = &mut out[(bi * cout + co) * oh * ow..][..oh * ow];
            out_plane.fill(bias[co]);
            for ci in 0..cin {
                let in_plane = &input[(bi * cin + ci) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weight[((co * cin + ci) * kh + ky) * kw + kx];
                        let Some((xlo, xhi)) = out_range(kx, pad_w, stride, w, ow) else {
                            continue;
                        };
                        for oy in 0..oh {
                            let iy = oy * stride + ky;
                            if iy < pad_h || iy - pad_h >= h {
                                continue;
                            }
                            let in_row = &in_plane[(iy - pad_h) * w..][..w];
                            let out_row = &mut out_plane[oy * ow..][..ow];
                            if stride == 1 {
                                let ix0 = xlo + kx - pad_w;
                                for (o, i) in out_row[xlo..=xhi]
                                    .iter_mut()
                                    .zip(in_row[ix0..ix0 + (xhi - xlo + 1)].iter())
                                {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in xlo..=xhi {
                                    out_row[ox] += wv * in_row[ox * stride + kx - pad_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    oh: usize,
    ow: usize,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; cout * cin * kh * kw];
    let mut gb = vec![0.0; cout];
    for bi in 0..b {
        for co in 0..cout {
            let go_plane = &grad_out[(bi * cout + co) * oh * ow..][..oh * ow];
            let mut acc = 0.0;
            for g in go_plane {
                acc += g;
            }
            gb[co] += acc;
            for ci in 0..cin {
                let in_plane = &input[(bi * cin + ci) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let Some((xlo, xhi)) = out_range(kx, pad_w, stride, w, ow) else {
                            continue;
                        };
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = oy * stride + ky;
                            if iy < pad_h || iy - pad_h >= h {
                                continue;
                            }
                            let in_row = &in_plane[(iy - pad_h) * w..][..w];
                            let go_row = &go_plane[oy * ow..][..ow];
                            if stride == 1 {
                                let ix0 = xlo + kx - pad_w;
                                for (g, i) in go_row[xlo..=xhi]
                                    .iter()
                                    .zip(in_row[ix0..ix0 + (xhi - xlo + 1)].iter())
                                {
                                    acc += g * i;
                                }
                            } else {
                                for ox in xlo..=xhi {
                                    acc += go_row[ox] * in_row[ox * stride + kx - pad_w];
                                }
                            }
                        }
                        gw[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    let gi = need_input.then(|| {
        let mut gi = vec![0.0; b * cin * h * w];
        for bi in 0..b {
            for ci in 0..cin {
                let gi_plane = &mut gi[(bi * cin + ci) * h * w..][..h * w];
                for co in 0..cout {
                    let go_plane = &grad_out[(bi * cout + co) * oh * ow..][..oh * ow];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = weight[((co * cin + ci) * kh + ky) * kw + kx];
                            let Some((xlo, xhi)) = out_range(kx, pad_w, stride, w, ow) else {
                                continue;
                            };
                            for oy in 0..oh {
                                let iy = oy * stride + ky;
                                if iy < pad_h || iy - pad_h >= h {
                                    continue;
                                }
                                let gi_row = &mut gi_plane[(iy - pad_h) * w..][..w];
                                let go_row = &go_plane[oy * ow..][..ow];
                                if stride == 1 {
                                    let ix0 = xlo + kx - pad_w;
                                    for (i, g) in gi_row[ix0..ix0 + (xhi - xlo + 1)]
                                        .iter_mut()
                                        .zip(go_row[xlo..=xhi].iter())
                                    {
                                        *i += wv * g;
                                    }
                                } else {
                                    for ox in xlo..=xhi {
                                        gi_row[ox * stride + kx - pad_w] += wv * go_row[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        gi
    });
    (gi, gw, gb)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    b: usize,
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    cout: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: [usize; 3],
    od: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * cout * od * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let out_vol = &mut out[(bi * cout + co) * od * oh * ow..][..od * oh * ow];
            out_vol.fill(bias[co]);
            for ci in 0..cin {
                let in_vol = &input[(bi * cin + ci) * d * h * w..][..d * h * w];
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv =
                                weight[(((co * cin + ci) * kd + kz) * kh + ky) * kw + kx];
                            let Some((xlo, xhi)) = out_range(kx, pad[2], stride, w, ow)
                            else {
                                continue;
                            };
                            for oz in 0..od {
                                let iz = oz * stride + kz;
                                if iz < pad[0] || iz - pad[0] >= d {
                                    continue;
                                }
                                let in_plane = &in_vol[(iz - pad[0]) * h * w..][..h * w];
                                let out_plane = &mut out_vol[oz * oh * ow..][..oh * ow];
                                for oy in 0..oh {
                                    let iy = oy * stride + ky;
                                    if iy < pad[1] || iy - pad[1] >= h {
                                        continue;
                                    }
                                    let in_row = &in_plane[(iy - pad[1]) * w..][..w];
                                    let out_row = &mut out_plane[oy * ow..][..ow];
                                    if stride == 1 {
                                        let ix0 = xlo + kx - pad[2];
                                        for (o, i) in out_row[xlo..=xhi]
                                            .iter_mut()
                                            .zip(in_row[ix0..ix0 + (xhi - xlo + 1)].iter())
                                        {
                                            *o += wv * i;
                                        }
                                    } else {
                                        for ox in xlo..=xhi {
                                            out_row[ox] +=
                                                wv * in_row[ox * stride + kx - pad[2]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    b: usize,
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    cout: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: [usize; 3],
    od: usize,
    oh: usize,
    ow: usize,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; cout * cin * kd * kh * kw];
    let mut gb = vec![0.0; cout];
    for bi in 0..b {
        for co in 0..cout {
            let go_vol = &grad_out[(bi * cout + co) * od * oh * ow..][..od * oh * ow];
            let mut acc = 0.0;
            for g in go_vol {
                acc += g;
            }
            gb[co] += acc;
            for ci in 0..cin {
                let in_vol = &input[(bi * cin + ci) * d * h * w..][..d * h * w];
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let Some((xlo, xhi)) = out_range(kx, pad[2], stride, w, ow)
                            else {
                                continue;
                            };
                            let mut acc = 0.0;
                            for oz in 0..od {
                                let iz = oz * stride + kz;
                                if iz < pad[0] || iz - pad[0] >= d {
                                    continue;
                                }
                                let in_plane = &in_vol[(iz - pad[0]) * h * w..][..h * w];
                                let go_plane = &go_vol[oz * oh * ow..][..oh * ow];
                                for oy in 0..oh {
                                    let iy = oy * stride + ky;
                                    if iy < pad[1] || iy - pad[1] >= h {
                                        continue;
                                    }
                                    let in_row = &in_plane[(iy - pad[1]) * w..][..w];
                                    let go_row = &go_plane[oy * ow..][..ow];
                                    if stride == 1 {
                                        let ix0 = xlo + kx - pad[2];
                                        for (g, i) in go_row[xlo..=xhi]
                                            .iter()
                                            .zip(in_row[ix0..ix0 + (xhi - xlo + 1)].iter())
                                        {
                                            acc += g * i;
                                        }
                                    } else {
                                        for ox in xlo..=xhi {
                                            acc += go_row[ox]
                                                * in_row[ox * stride + kx - pad[2]];
                                        }
                                    }
                                }
                            }
                            gw[(((co * cin + ci) * kd + kz) * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    let gi = need_input.then(|| {
        let mut gi = vec![0.0; b * cin * d * h * w];
        for bi in 0..b {
            for ci in 0..cin {
                let gi_vol = &mut gi[(bi * cin + ci) * d * h * w..][..d * h * w];
                for co in 0..cout {
                    let go_vol =
                        &grad_out[(bi * cout + co) * od * oh * ow..][..od * oh * ow];
                    for kz in 0..kd {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = weight
                                    [(((co * cin + ci) * kd + kz) * kh + ky) * kw + kx];
                                let Some((xlo, xhi)) =
                                    out_range(kx, pad[2], stride, w, ow)
                                else {
                                    continue;
                                };
                                for oz in 0..od {
                                    let iz = oz * stride + kz;
                                    if iz < pad[0] || iz - pad[0] >= d {
                                        continue;
                                    }
                                    let gi_plane =
                                        &mut gi_vol[(iz - pad[0]) * h * w..][..h * w];
                                    let go_plane = &go_vol[oz * oh * ow..][..oh * ow];
                                    for oy in 0..oh {
                                        let iy = oy * stride + ky;
                                        if iy < pad[1] || iy - pad[1] >= h {
                                            continue;
                                        }
                                        let gi_row =
                                            &mut gi_plane[(iy - pad[1]) * w..][..w];
                                        let go_row = &go_plane[oy * ow..][..ow];
                                        if stride == 1 {
                                            let ix0 = xlo + kx - pad[2];
                                            for (i, g) in gi_row
                                                [ix0..ix0 + (xhi - xlo + 1)]
                                                .iter_mut()
                                                .zip(go_row[xlo..=xhi].iter())
                                            {
                                                *i += wv * g;
                                            }
                                        } else {
                                            for ox in xlo..=xhi {
                                                gi_row[ox * stride + kx - pad[2]] +=
                                                    wv * go_row[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        gi
    });
    (gi, gw, gb)
}

/// Source indices and fractional weight for one axis of an
/// align-corners=false resample.
pub(crate) fn interp_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Trilinear resample of `[B,C,D,H,W]` volumes to new spatial dims.
///
/// Interpolation is evaluated as nested `a + f*(b-a)` lerps, so constant
/// fields pass through bit-exactly and a unit scale is the identity.
#[allow(clippy::too_many_arguments)]
pub(crate) fn interp3d_forward(
    input: &[f64],
    bc: usize,
    d: usize,
    h: usize,
    w: usize,
    od: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ax_d = interp_axis(d, od);
    let ax_h = interp_axis(h, oh);
    let ax_w = interp_axis(w, ow);
    let mut out = vec![0.0; bc * od * oh * ow];
    for c in 0..bc {
        let vol = &input[c * d * h * w..][..d * h * w];
        let out_vol = &mut out[c * od * oh * ow..][..od * oh * ow];
        for (oz, &(d0, d1, fd)) in ax_d.iter().enumerate() {
            for (oy, &(h0, h1, fh)) in ax_h.iter().enumerate() {
                let r00 = &vol[(d0 * h + h0) * w..][..w];
                let r01 = &vol[(d0 * h + h1) * w..][..w];
                let r10 = &vol[(d1 * h + h0) * w..][..w];
                let r11 = &vol[(d1 * h + h1) * w..][..w];
                let out_row = &mut out_vol[(oz * oh + oy) * ow..][..ow];
                for (ox, &(w0, w1, fw)) in ax_w.iter().enumerate() {
                    let a = r00[w0] + fw * (r00[w1] - r00[w0]);
                    let b = r01[w0] + fw * (r01[w1] - r01[w0]);
                    let c_ = r10[w0] + fw * (r10[w1] - r10[w0]);
                    let d_ = r11[w0] + fw * (r11[w1] - r11[w0]);
                    let e = a + fh * (b - a);
                    let f = c_ + fh * (d_ - c_);
                    out_row[ox] = e + fd * (f - e);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn interp3d_backward(
    grad_out: &[f64],
    bc: usize,
    d: usize,
    h: usize,
    w: usize,
    od: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ax_d = interp_axis(d, od);
    let ax_h = interp_axis(h, oh);
    let ax_w = interp_axis(w, ow);
    let mut gi = vec![0.0; bc * d * h * w];
    for c in 0..bc {
        let go_vol = &grad_out[c * od * oh * ow..][..od * oh * ow];
        let gi_vol = &mut gi[c * d * h * w..][..d * h * w];
        for (oz, &(d0, d1, fd)) in ax_d.iter().enumerate() {
            for (oy, &(h0, h1, fh)) in ax_h.iter().enumerate() {
                let go_row = &go_vol[(oz * oh + oy) * ow..][..ow];
                for (ox, &(w0, w1, fw)) in ax_w.iter().enumerate() {
                    let g = go_row[ox];
                    let (cd0, cd1) = (1.0 - fd, fd);
                    let (ch0, ch1) = (1.0 - fh, fh);
                    let (cw0, cw1) = (1.0 - fw, fw);
                    gi_vol[(d0 * h + h0) * w + w0] += g * cd0 * ch0 * cw0;
                    gi_vol[(d0 * h + h0) * w + w1] += g * cd0 * ch0 * cw1;
                    gi_vol[(d0 * h + h1) * w + w0] += g * cd0 * ch1 * cw0;
                    gi_vol[(d0 * h + h1) * w + w1] += g * cd0 * ch1 * cw1;
                    gi_vol[(d1 * h + h0) * w + w0] += g * cd1 * ch0 * cw0;
                    gi_vol[(d1 * h + h0) * w + w1] += g * cd1 * ch0 * cw1;
                    gi_vol[(d1 * h + h1) * w + w0] += g * cd1 * ch1 * cw0;
                    gi_vol[(d1 * h + h1) * w + w1] += g * cd1 * ch1 * cw1;
                }
            }
        }
    }
    gi
}

/// Numerically stabilized softmax along one axis, viewed as
/// `[outer, n, inner]`.
pub(crate) fn softmax_forward(input: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                max = max.max(input[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..n {
                let e = (input[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..n {
                out[base + j * inner] /= sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(
    output: &[f64],
    grad_out: &[f64],
    outer: usize,
    n: usize,
    inner: usize,
) -> Vec<f64> {
    let mut gi = vec![0.0; output.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = 0.0;
            for j in 0..n {
                dot += output[base + j * inner] * grad_out[base + j * inner];
            }
            for j in 0..n {
                let idx = base + j * inner;
                gi[idx] = output[idx] * (grad_out[idx] - dot);
            }
        }
    }
    gi
}
