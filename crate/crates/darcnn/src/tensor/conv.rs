//! im2col / col2im kernels backing the convolution op.

use ndarray::{Array2, Array3, ArrayView3};

use super::conv_out;
use crate::scalar::Scalar;

/// Unfold a `[C,H,W]` image into a `[C*kh*kw, oh*ow]` patch matrix.
pub fn im2col<F: Scalar>(
    x: &ArrayView3<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let mut col = Array2::<F>::zeros((c * kh * kw, oh * ow));
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[(row, oy * ow + ox)] = x[(ch, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Fold a patch-matrix gradient back onto the `[C,H,W]` input, accumulating
/// overlapping contributions.
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Scalar>(
    col: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let mut out = Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[(ch, iy as usize, ix as usize)] =
                            out[(ch, iy as usize, ix as usize)] + col[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    out
}
