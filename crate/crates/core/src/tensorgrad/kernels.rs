//! Convolution, pooling, and dense kernels.
//!
//! Accumulation-order contract: for every output element the contributing
//! terms are added in ascending (input-channel, kernel-row, kernel-col)
//! order, starting from the bias. A naive per-output-pixel loop with that
//! same inner ordering produces identical floating point results, which is
//! what the reference-equivalence tests rely on. All-zero input rows may be
//! skipped: adding an exact zero never changes a finite accumulator's value.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Spatial geometry of a 2-D convolution (symmetric per-axis values).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub fn unit() -> Self {
        ConvGeom {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
        }
    }

    /// 3x3-style "same" geometry: stride 1, padding = dilation.
    pub fn same(dilation: usize) -> Self {
        ConvGeom {
            stride: (1, 1),
            dilation: (dilation, dilation),
            padding: (dilation, dilation),
        }
    }
}

/// Output extent along one axis, or `None` when the dilated kernel does not fit.
pub fn conv_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Option<usize> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return None;
    }
    let effective = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < effective {
        return None;
    }
    Some((padded - effective) / stride + 1)
}

/// Output spatial dims of a convolution over a `(c, h, w)` input.
pub fn conv2d_out_dims(
    in_dims: (usize, usize, usize),
    kernel: (usize, usize),
    geom: ConvGeom,
) -> Option<(usize, usize)> {
    let oh = conv_out_dim(in_dims.1, kernel.0, geom.stride.0, geom.dilation.0, geom.padding.0)?;
    let ow = conv_out_dim(in_dims.2, kernel.1, geom.stride.1, geom.dilation.1, geom.padding.1)?;
    Some((oh, ow))
}

/// Per-row "has any nonzero element" map, `c * h` entries.
fn row_occupancy<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> Vec<bool> {
    debug_assert_eq!(x.len(), c * h * w);
    let live: Vec<bool> = x
        .chunks_exact(w)
        .map(|row| row.iter().any(|v| *v != S::zero()))
        .collect();
    debug_assert_eq!(live.len(), c * h);
    live
}

/// Valid output-column range `[lo, hi)` for a kernel column offset.
///
/// `off` is the signed input-column offset (`kx * dilation - padding`); valid
/// output columns are those whose input column `ox * stride + off` lands in
/// `[0, w)`.
fn col_range(ow: usize, w: usize, stride: usize, off: isize) -> (usize, usize) {
    let sw = stride as isize;
    let lo = if off < 0 {
        (((-off) + sw - 1) / sw) as usize
    } else {
        0
    };
    let w = w as isize;
    if off >= w {
        return (0, 0);
    }
    let hi = (((w - off) + sw - 1) / sw) as usize;
    (lo.min(ow), hi.min(ow))
}

/// Dense 2-D convolution forward pass.
///
/// `x` is `(c, h, w)`, `weight` is `(o, c, kh, kw)`, `bias` is `(o)`; the
/// result is `(o, oh, ow)` row-major.
pub fn conv2d_forward<S: Scalar>(
    x: &[S],
    in_dims: (usize, usize, usize),
    weight: &[S],
    k_dims: (usize, usize, usize, usize),
    bias: &[S],
    geom: ConvGeom,
) -> Vec<S> {
    let (c, h, w) = in_dims;
    let (o, kc, kh, kw) = k_dims;
    debug_assert_eq!(c, kc);
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(weight.len(), o * c * kh * kw);
    debug_assert_eq!(bias.len(), o);
    let (oh, ow) = conv2d_out_dims(in_dims, (kh, kw), geom).expect("kernel fits input");
    let (sh, sw) = geom.stride;
    let (dh, dw) = geom.dilation;
    let (ph, pw) = geom.padding;

    let live = row_occupancy(x, c, h, w);
    let chan_live: Vec<bool> = live.chunks_exact(h).map(|rows| rows.iter().any(|b| *b)).collect();

    let mut out = vec![S::zero(); o * oh * ow];
    for oc in 0..o {
        out[oc * oh * ow..(oc + 1) * oh * ow].fill(bias[oc]);
    }

    for oc in 0..o {
        let out_plane = oc * oh * ow;
        for ic in 0..c {
            if !chan_live[ic] {
                continue;
            }
            let in_plane = ic * h * w;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight[((oc * c + ic) * kh + ky) * kw + kx];
                    let off = (kx * dw) as isize - pw as isize;
                    let (lo, hi) = col_range(ow, w, sw, off);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * sh + ky * dh) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        if !live[ic * h + iy] {
                            continue;
                        }
                        let in_row = &x[in_plane + iy * w..in_plane + (iy + 1) * w];
                        let out_row = &mut out[out_plane + oy * ow + lo..out_plane + oy * ow + hi];
                        let start = (lo as isize * sw as isize + off) as usize;
                        if sw == 1 {
                            let in_seg = &in_row[start..start + (hi - lo)];
                            for (ov, iv) in out_row.iter_mut().zip(in_seg) {
                                *ov += wv * *iv;
                            }
                        } else {
                            let in_seg = in_row[start..].iter().step_by(sw);
                            for (ov, iv) in out_row.iter_mut().zip(in_seg) {
                                *ov += wv * *iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input.
pub fn conv2d_backward_input<S: Scalar>(
    gy: &[S],
    in_dims: (usize, usize, usize),
    weight: &[S],
    k_dims: (usize, usize, usize, usize),
    geom: ConvGeom,
) -> Vec<S> {
    let (c, h, w) = in_dims;
    let (o, _, kh, kw) = k_dims;
    let (oh, ow) = conv2d_out_dims(in_dims, (kh, kw), geom).expect("kernel fits input");
    debug_assert_eq!(gy.len(), o * oh * ow);
    let (sh, sw) = geom.stride;
    let (dh, dw) = geom.dilation;
    let (ph, pw) = geom.padding;

    let mut gx = vec![S::zero(); c * h * w];
    for ic in 0..c {
        let in_plane = ic * h * w;
        for oc in 0..o {
            let out_plane = oc * oh * ow;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight[((oc * c + ic) * kh + ky) * kw + kx];
                    let off = (kx * dw) as isize - pw as isize;
                    let (lo, hi) = col_range(ow, w, sw, off);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * sh + ky * dh) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let gy_row = &gy[out_plane + oy * ow + lo..out_plane + oy * ow + hi];
                        let start = (lo as isize * sw as isize + off) as usize;
                        let gx_row = &mut gx[in_plane + iy * w..in_plane + (iy + 1) * w];
                        if sw == 1 {
                            let seg = &mut gx_row[start..start + (hi - lo)];
                            for (xv, gv) in seg.iter_mut().zip(gy_row) {
                                *xv += wv * *gv;
                            }
                        } else {
                            for (i, gv) in gy_row.iter().enumerate() {
                                gx_row[start + i * sw] += wv * *gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradients w.r.t. the convolution weights and bias.
pub fn conv2d_backward_weights<S: Scalar>(
    x: &[S],
    in_dims: (usize, usize, usize),
    gy: &[S],
    k_dims: (usize, usize, usize, usize),
    geom: ConvGeom,
) -> (Vec<S>, Vec<S>) {
    let (c, h, w) = in_dims;
    let (o, _, kh, kw) = k_dims;
    let (oh, ow) = conv2d_out_dims(in_dims, (kh, kw), geom).expect("kernel fits input");
    debug_assert_eq!(gy.len(), o * oh * ow);
    let (sh, sw) = geom.stride;
    let (dh, dw) = geom.dilation;
    let (ph, pw) = geom.padding;

    let live = row_occupancy(x, c, h, w);

    let mut gw = vec![S::zero(); o * c * kh * kw];
    let mut gb = vec![S::zero(); o];
    for oc in 0..o {
        let out_plane = oc * oh * ow;
        let mut bsum = S::zero();
        for gv in &gy[out_plane..out_plane + oh * ow] {
            bsum += *gv;
        }
        gb[oc] = bsum;

        for ic in 0..c {
            let in_plane = ic * h * w;
            for ky in 0..kh {
                for kx in 0..kw {
                    let off = (kx * dw) as isize - pw as isize;
                    let (lo, hi) = col_range(ow, w, sw, off);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = S::zero();
                    for oy in 0..oh {
                        let iy = (oy * sh + ky * dh) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        if !live[ic * h + iy] {
                            continue;
                        }
                        let gy_row = &gy[out_plane + oy * ow + lo..out_plane + oy * ow + hi];
                        let in_row = &x[in_plane + iy * w..in_plane + (iy + 1) * w];
                        let start = (lo as isize * sw as isize + off) as usize;
                        if sw == 1 {
                            let seg = &in_row[start..start + (hi - lo)];
                            for (gv, iv) in gy_row.iter().zip(seg) {
                                acc += *gv * *iv;
                            }
                        } else {
                            let seg = in_row[start..].iter().step_by(sw);
                            for (gv, iv) in gy_row.iter().zip(seg) {
                                acc += *gv * *iv;
                            }
                        }
                    }
                    gw[((oc * c + ic) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    (gw, gb)
}

/// Non-overlapping max pooling; returns values and per-output argmax
/// (flat index inside the channel plane). Ties keep the first (row-major)
/// maximum.
pub fn max_pool2d_forward<S: Scalar>(
    x: &[S],
    in_dims: (usize, usize, usize),
    kernel: (usize, usize),
) -> (Vec<S>, Vec<u32>) {
    let (c, h, w) = in_dims;
    let (kh, kw) = kernel;
    let (oh, ow) = (h / kh, w / kw);
    let mut out = vec![S::zero(); c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ic in 0..c {
        let plane = ic * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x[plane + (oy * kh) * w + ox * kw];
                let mut best_idx = ((oy * kh) * w + ox * kw) as u32;
                for dy in 0..kh {
                    let iy = oy * kh + dy;
                    for dx in 0..kw {
                        let ix = ox * kw + dx;
                        let v = x[plane + iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = (iy * w + ix) as u32;
                        }
                    }
                }
                out[(ic * oh + oy) * ow + ox] = best;
                arg[(ic * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    (out, arg)
}

/// Scatter max-pool gradients back to the argmax positions.
pub fn max_pool2d_backward<S: Scalar>(
    gy: &[S],
    arg: &[u32],
    in_dims: (usize, usize, usize),
    out_dims: (usize, usize),
) -> Vec<S> {
    let (c, h, w) = in_dims;
    let (oh, ow) = out_dims;
    debug_assert_eq!(gy.len(), c * oh * ow);
    let mut gx = vec![S::zero(); c * h * w];
    for ic in 0..c {
        let plane = ic * h * w;
        for i in 0..oh * ow {
            gx[plane + arg[ic * oh * ow + i] as usize] += gy[ic * oh * ow + i];
        }
    }
    gx
}

/// Non-overlapping average pooling.
pub fn avg_pool2d_forward<S: Scalar>(
    x: &[S],
    in_dims: (usize, usize, usize),
    kernel: (usize, usize),
) -> Vec<S> {
    let (c, h, w) = in_dims;
    let (kh, kw) = kernel;
    let (oh, ow) = (h / kh, w / kw);
    let denom = S::cast_from((kh * kw) as f64);
    let mut out = vec![S::zero(); c * oh * ow];
    for ic in 0..c {
        let plane = ic * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for dy in 0..kh {
                    for dx in 0..kw {
                        acc += x[plane + (oy * kh + dy) * w + ox * kw + dx];
                    }
                }
                out[(ic * oh + oy) * ow + ox] = acc / denom;
            }
        }
    }
    out
}

/// Spread average-pool gradients uniformly over each window.
pub fn avg_pool2d_backward<S: Scalar>(
    gy: &[S],
    in_dims: (usize, usize, usize),
    kernel: (usize, usize),
) -> Vec<S> {
    let (c, h, w) = in_dims;
    let (kh, kw) = kernel;
    let (oh, ow) = (h / kh, w / kw);
    debug_assert_eq!(gy.len(), c * oh * ow);
    let denom = S::cast_from((kh * kw) as f64);
    let mut gx = vec![S::zero(); c * h * w];
    for ic in 0..c {
        let plane = ic * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy[(ic * oh + oy) * ow + ox] / denom;
                for dy in 0..kh {
                    for dx in 0..kw {
                        gx[plane + (oy * kh + dy) * w + ox * kw + dx] += g;
                    }
                }
            }
        }
    }
    gx
}

/// Dense layer forward: `y = W x + b`, `W` is `(out, in)` row-major.
pub fn dense_forward<S: Scalar>(w: &[S], x: &[S], b: &[S]) -> Vec<S> {
    let n_in = x.len();
    let n_out = b.len();
    debug_assert_eq!(w.len(), n_in * n_out);
    let mut y = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = b[o];
        for (wv, xv) in row.iter().zip(x) {
            acc += *wv * *xv;
        }
        y.push(acc);
    }
    y
}

/// Dense layer backward; returns `(gx, gw, gb)`.
pub fn dense_backward<S: Scalar>(w: &[S], x: &[S], gy: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
    let n_in = x.len();
    let n_out = gy.len();
    debug_assert_eq!(w.len(), n_in * n_out);
    let mut gx = vec![S::zero(); n_in];
    let mut gw = vec![S::zero(); n_in * n_out];
    for o in 0..n_out {
        let g = gy[o];
        let row = &w[o * n_in..(o + 1) * n_in];
        let grow = &mut gw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            gx[i] += row[i] * g;
            grow[i] = x[i] * g;
        }
    }
    (gx, gw, gy.to_vec())
}
