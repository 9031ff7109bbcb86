//! Slice-level kernels shared by graph ops. Shapes are validated by callers.

use super::real::Real;

/// Spatial geometry of a strided, zero-padded sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    /// `None` when the kernel does not fit or the stride is zero.
    pub fn new(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return None;
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        Some(Window { h, w, kh, kw, stride, pad, out_h, out_w })
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output positions `[lo, hi)` whose tap `k` lands inside an axis of `extent`.
    #[inline]
    fn valid(k: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
        // need 0 <= o*stride + k - pad < extent
        let lo = pad.saturating_sub(k).div_ceil(stride);
        let hi = if extent + pad > k { ((extent + pad - k - 1) / stride + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Unfolds one `[c, h, w]` image into `[c*kh*kw, out_h*out_w]` columns.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, win: &Window, cols: &mut [T]) {
    let p = win.out_h * win.out_w;
    let s = win.stride;
    debug_assert_eq!(cols.len(), c * win.kh * win.kw * p);
    for ci in 0..c {
        let plane = &x[ci * win.h * win.w..(ci + 1) * win.h * win.w];
        for ki in 0..win.kh {
            let (y0, y1) = Window::valid(ki, s, win.pad, win.h, win.out_h);
            for kj in 0..win.kw {
                let (x0, x1) = Window::valid(kj, s, win.pad, win.w, win.out_w);
                let row = (ci * win.kh + ki) * win.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                dst.fill(T::zero());
                for oy in y0..y1 {
                    let base = (oy * s + ki - win.pad) * win.w + x0 * s + kj - win.pad;
                    let drow = &mut dst[oy * win.out_w + x0..oy * win.out_w + x1];
                    if s == 1 {
                        drow.copy_from_slice(&plane[base..base + drow.len()]);
                    } else {
                        for (i, d) in drow.iter_mut().enumerate() {
                            *d = plane[base + i * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back, accumulating into `dx`.
pub(crate) fn col2im<T: Real>(cols: &[T], c: usize, win: &Window, dx: &mut [T]) {
    let p = win.out_h * win.out_w;
    let s = win.stride;
    for ci in 0..c {
        let plane = &mut dx[ci * win.h * win.w..(ci + 1) * win.h * win.w];
        for ki in 0..win.kh {
            let (y0, y1) = Window::valid(ki, s, win.pad, win.h, win.out_h);
            for kj in 0..win.kw {
                let (x0, x1) = Window::valid(kj, s, win.pad, win.w, win.out_w);
                let row = (ci * win.kh + ki) * win.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in y0..y1 {
                    let base = (oy * s + ki - win.pad) * win.w + x0 * s + kj - win.pad;
                    for (i, &g) in src[oy * win.out_w + x0..oy * win.out_w + x1].iter().enumerate() {
                        plane[base + i * s] += g;
                    }
                }
            }
        }
    }
}

/// Per-channel sliding window over one `[c, h, w]` image.
pub(crate) fn depthwise_forward<T: Real>(x: &[T], w: &[T], c: usize, win: &Window, out: &mut [T]) {
    let (hw, khw, p) = (win.h * win.w, win.kh * win.kw, win.out_h * win.out_w);
    let s = win.stride;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        let kernel = &w[ci * khw..(ci + 1) * khw];
        let dst = &mut out[ci * p..(ci + 1) * p];
        dst.fill(T::zero());
        for ki in 0..win.kh {
            let (y0, y1) = Window::valid(ki, s, win.pad, win.h, win.out_h);
            for kj in 0..win.kw {
                let (x0, x1) = Window::valid(kj, s, win.pad, win.w, win.out_w);
                let k = kernel[ki * win.kw + kj];
                for oy in y0..y1 {
                    let row = &plane[(oy * s + ki - win.pad) * win.w..];
                    let drow = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    let sx0 = x0 * s + kj - win.pad;
                    if s == 1 {
                        for (d, &v) in drow[x0..x1].iter_mut().zip(&row[sx0..sx0 + (x1 - x0)]) {
                            *d += k * v;
                        }
                    } else {
                        for (i, d) in drow[x0..x1].iter_mut().enumerate() {
                            *d += k * row[sx0 + i * s];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise_forward`]; either output buffer may be skipped.
pub(crate) fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    c: usize,
    win: &Window,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (hw, khw, p) = (win.h * win.w, win.kh * win.kw, win.out_h * win.out_w);
    let s = win.stride;
    for ci in 0..c {
        let gplane = &g[ci * p..(ci + 1) * p];
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..win.kh {
            let (y0, y1) = Window::valid(ki, s, win.pad, win.h, win.out_h);
            for kj in 0..win.kw {
                let (x0, x1) = Window::valid(kj, s, win.pad, win.w, win.out_w);
                let wi = ci * khw + ki * win.kw + kj;
                let k = w[wi];
                let mut acc = T::zero();
                for oy in y0..y1 {
                    let base = (oy * s + ki - win.pad) * win.w + x0 * s + kj - win.pad;
                    let grow = &gplane[oy * win.out_w + x0..oy * win.out_w + x1];
                    if let Some(dx) = dx.as_deref_mut() {
                        let drow = &mut dx[ci * hw..(ci + 1) * hw];
                        for (i, &go) in grow.iter().enumerate() {
                            drow[base + i * s] += go * k;
                        }
                    }
                    if dw.is_some() {
                        for (i, &go) in grow.iter().enumerate() {
                            acc += go * plane[base + i * s];
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[wi] += acc;
                }
            }
        }
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Copies `src` (shape `shape`) into `dst` with axes reordered so that output
/// axis `i` is input axis `perm[i]`.
pub(crate) fn permute_into<T: Copy>(src: &[T], shape: &[usize], perm: &[usize], dst: &mut [T]) {
    let rank = shape.len();
    if rank == 0 || src.is_empty() {
        dst.copy_from_slice(src);
        return;
    }
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    let last = rank - 1;
    let (inner_n, inner_step) = (out_shape[last], step[last]);
    let mut o = 0;
    while o < dst.len() {
        // innermost axis as a tight loop
        let mut s = src_off;
        for d in dst[o..o + inner_n].iter_mut() {
            *d = src[s];
            s += inner_step;
        }
        o += inner_n;
        // carry into the outer axes
        let mut axis = last;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            src_off += step[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src_off -= step[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
