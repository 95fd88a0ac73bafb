//! Raw numeric kernels shared by the forward and backward rules.
//!
//! Spatial tensors are `(channels, height, width)` in row-major order.

use std::ops::Range;

/// Output rows/cols `r` for which `r + offset` stays inside `0..len`.
#[inline]
fn valid_range(len: usize, offset: isize) -> Range<usize> {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).min(len as isize).max(0) as usize;
    lo..hi.max(lo)
}

/// `out += conv3x3(input, weight)`, stride 1, zero padding 1.
pub(crate) fn conv3x3_forward(
    input: &[f64],
    weight: &[f64],
    out: &mut [f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for co in 0..c_out {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..c_in {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            let kernel = &weight[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let rows = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let cols = valid_range(w, dx);
                    let k = kernel[ky * 3 + kx];
                    if k == 0.0 {
                        continue;
                    }
                    for y in rows.clone() {
                        let src_y = (y as isize + dy) as usize;
                        let src_x0 = (cols.start as isize + dx) as usize;
                        let len = cols.len();
                        let dst = &mut out_plane[y * w + cols.start..y * w + cols.start + len];
                        let src = &in_plane[src_y * w + src_x0..src_y * w + src_x0 + len];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += k * s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients of a 3x3 convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_in: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    if let Some(gi) = grad_in {
        for co in 0..c_out {
            let go_plane = &grad_out[co * plane..(co + 1) * plane];
            for ci in 0..c_in {
                let gi_plane = &mut gi[ci * plane..(ci + 1) * plane];
                let kernel = &weight[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let rows = valid_range(h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let cols = valid_range(w, dx);
                        let k = kernel[ky * 3 + kx];
                        if k == 0.0 {
                            continue;
                        }
                        let len = cols.len();
                        for y in rows.clone() {
                            let src_y = (y as isize + dy) as usize;
                            let src_x0 = (cols.start as isize + dx) as usize;
                            let g = &go_plane[y * w + cols.start..y * w + cols.start + len];
                            let dst = &mut gi_plane[src_y * w + src_x0..src_y * w + src_x0 + len];
                            for (d, s) in dst.iter_mut().zip(g) {
                                *d += k * s;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = grad_w {
        for co in 0..c_out {
            let go_plane = &grad_out[co * plane..(co + 1) * plane];
            for ci in 0..c_in {
                let in_plane = &input[ci * plane..(ci + 1) * plane];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let rows = valid_range(h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let cols = valid_range(w, dx);
                        let len = cols.len();
                        let mut acc = 0.0;
                        for y in rows.clone() {
                            let src_y = (y as isize + dy) as usize;
                            let src_x0 = (cols.start as isize + dx) as usize;
                            let g = &go_plane[y * w + cols.start..y * w + cols.start + len];
                            let s = &in_plane[src_y * w + src_x0..src_y * w + src_x0 + len];
                            acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gw[(co * c_in + ci) * 9 + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
}

/// `out = a (m x k) * b (k x n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn upsample2x(input: &[f64], out: &mut [f64], c: usize, h: usize, w: usize) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..oh {
            let src = &input[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            let dst = &mut out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block of `grad_out` into `grad_in`.
pub(crate) fn upsample2x_adjoint(grad_out: &[f64], grad_in: &mut [f64], c: usize, h: usize, w: usize) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..oh {
            let src = &grad_out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            let dst = &mut grad_in[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            for (x, g) in src.iter().enumerate() {
                dst[x / 2] += g;
            }
        }
    }
}

/// 2x2 average pooling; `h` and `w` are the input sizes and must be even.
pub(crate) fn downsample2x(input: &[f64], out: &mut [f64], c: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let inp = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                dst[y * ow + x] = 0.25 * (inp[i] + inp[i + 1] + inp[i + w] + inp[i + w + 1]);
            }
        }
    }
}

pub(crate) fn downsample2x_adjoint(grad_out: &[f64], grad_in: &mut [f64], c: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let gi = &mut grad_in[ch * h * w..(ch + 1) * h * w];
        let go = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * go[y * ow + x];
                let i = 2 * y * w + 2 * x;
                gi[i] += g;
                gi[i + 1] += g;
                gi[i + w] += g;
                gi[i + w + 1] += g;
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(sum(exp(xs)))`.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
