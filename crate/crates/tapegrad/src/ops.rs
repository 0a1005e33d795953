//! Dense kernels behind the graph operations.

use crate::float::Float;

/// Border sizes for padding operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

/// Unfolds a `[c,h,w]` image into a `[c·k·k, h·w]` matrix for a stride-1,
/// zero-padded (`k/2`) convolution.
pub(crate) fn im2col<T: Float>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut Vec<T>) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    col.clear();
    col.resize(c * k * k * hw, T::zero());
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                // Valid output x range such that 0 <= x + dx < w.
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let sx_lo = (x_lo as isize + dx) as usize;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&src_row[sx_lo..sx_lo + (x_hi - x_lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back onto an image.
pub(crate) fn col2im<T: Float>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut dx_out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let sx_lo = (x_lo as isize + dx) as usize;
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (d, &s) in dst_row[sx_lo..sx_lo + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[y * w + x_lo..y * w + x_hi])
                    {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn conv2d_forward<T: Float>(x: &[T], weight: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let hw = d.h * d.w;
    let kk = d.c_in * d.k * d.k;
    let mut col = Vec::new();
    im2col(x, d.c_in, d.h, d.w, d.k, &mut col);
    let mut out = vec![T::zero(); d.c_out * hw];
    for (o, row) in out.chunks_mut(hw).enumerate() {
        row.fill(bias[o]);
    }
    T::gemm(d.c_out, kk, hw, weight, false, &col, false, T::one(), &mut out);
    out
}

/// Returns `(dx, dweight, dbias)`; each is computed only when requested.
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    weight: &[T],
    grad: &[T],
    d: &ConvDims,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = d.h * d.w;
    let kk = d.c_in * d.k * d.k;
    let dw = need.1.then(|| {
        let mut col = Vec::new();
        im2col(x, d.c_in, d.h, d.w, d.k, &mut col);
        let mut dw = vec![T::zero(); d.c_out * kk];
        T::gemm(d.c_out, hw, kk, grad, false, &col, true, T::zero(), &mut dw);
        dw
    });
    let dx = need.0.then(|| {
        let mut dcol = vec![T::zero(); kk * hw];
        T::gemm(kk, d.c_out, hw, weight, true, grad, false, T::zero(), &mut dcol);
        let mut dx = vec![T::zero(); d.c_in * hw];
        col2im(&dcol, d.c_in, d.h, d.w, d.k, &mut dx);
        dx
    });
    let db = need
        .2
        .then(|| grad.chunks(hw).map(|row| row.iter().copied().sum()).collect());
    (dx, dw, db)
}

/// Constant kernel applied independently to every channel (valid region).
#[derive(Clone, Debug, PartialEq)]
pub struct FilterKernel<T> {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub weights: Vec<T>,
}

impl<T: Float> FilterKernel<T> {
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if h < self.kh || w < self.kw || self.stride == 0 {
            return None;
        }
        Some((
            (h - self.kh) / self.stride + 1,
            (w - self.kw) / self.stride + 1,
        ))
    }
}

pub(crate) fn filter_forward<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: &FilterKernel<T>,
) -> (Vec<T>, usize, usize) {
    let (oh, ow) = k.output_size(h, w).expect("checked by caller");
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..k.kh {
                    let row = &plane[(oy * k.stride + ky) * w + ox * k.stride..];
                    for kx in 0..k.kw {
                        acc += k.weights[ky * k.kw + kx] * row[kx];
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

pub(crate) fn filter_backward<T: Float>(
    grad: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: &FilterKernel<T>,
) -> Vec<T> {
    let (oh, ow) = k.output_size(h, w).expect("checked by caller");
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        let g = &grad[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[oy * ow + ox];
                for ky in 0..k.kh {
                    let base = (oy * k.stride + ky) * w + ox * k.stride;
                    for kx in 0..k.kw {
                        plane[base + kx] += k.weights[ky * k.kw + kx] * gv;
                    }
                }
            }
        }
    }
    dx
}

/// How out-of-range coordinates are mapped back into the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum PadMode {
    Replicate,
    Reflect,
}

impl PadMode {
    #[inline]
    pub(crate) fn source(self, i: isize, n: usize) -> usize {
        let last = n as isize - 1;
        match self {
            PadMode::Replicate => i.clamp(0, last) as usize,
            PadMode::Reflect => {
                let r = if i < 0 { -i } else if i > last { 2 * last - i } else { i };
                r.clamp(0, last) as usize
            }
        }
    }
}
