//! Mask resampling and rasterization helpers shared by the mask head,
//! pseudo-labelling, and evaluation.

use ndarray::{Array2, ArrayView2};

use crate::core::geometry::RectF;

/// Bilinearly resample a probability grid to a new size. Cell centers sit at
/// integer + 0.5 in both grids.
pub fn resize_bilinear(src: &ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        let sy = (oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        let y0 = sy.floor();
        let wy = (sy - y0) as f32;
        let yi0 = (y0.max(0.0) as usize).min(h - 1);
        let yi1 = ((y0 + 1.0).max(0.0) as usize).min(h - 1);
        for ox in 0..out_w {
            let sx = (ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            let x0 = sx.floor();
            let wx = (sx - x0) as f32;
            let xi0 = (x0.max(0.0) as usize).min(w - 1);
            let xi1 = ((x0 + 1.0).max(0.0) as usize).min(w - 1);
            out[(oy, ox)] = (1.0 - wy) * (1.0 - wx) * src[(yi0, xi0)]
                + (1.0 - wy) * wx * src[(yi0, xi1)]
                + wy * (1.0 - wx) * src[(yi1, xi0)]
                + wy * wx * src[(yi1, xi1)];
        }
    }
    out
}

/// Nearest-neighbor resample; used where thresholding must stay crisp.
pub fn resize_nearest(src: &ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64) as usize;
        let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64) as usize;
        src[(sy.min(h - 1), sx.min(w - 1))]
    })
}

/// Paste region-grid mask probabilities into a full-image binary mask:
/// probabilities are resampled to the box footprint and thresholded at 0.5.
pub fn paste_mask(
    probs: &ArrayView2<'_, f32>,
    bbox: &RectF,
    img_h: usize,
    img_w: usize,
) -> Array2<bool> {
    let mut out = Array2::from_elem((img_h, img_w), false);
    let x0 = bbox.x0.floor().max(0.0) as usize;
    let y0 = bbox.y0.floor().max(0.0) as usize;
    let x1 = (bbox.x1.ceil() as usize).min(img_w);
    let y1 = (bbox.y1.ceil() as usize).min(img_h);
    if x1 <= x0 || y1 <= y0 {
        return out;
    }
    let resized = resize_bilinear(probs, y1 - y0, x1 - x0);
    for y in 0..(y1 - y0) {
        for x in 0..(x1 - x0) {
            if resized[(y, x)] >= 0.5 {
                out[(y0 + y, x0 + x)] = true;
            }
        }
    }
    out
}

/// Rasterize a binary ground-truth mask restricted to a pixel-unit box onto
/// an `out x out` region grid; used to build mask-head training targets.
pub fn rasterize_to_grid(
    mask: &ArrayView2<'_, bool>,
    bbox: &RectF,
    out: usize,
) -> Array2<f32> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((out, out), |(gy, gx)| {
        let sy = bbox.y0 + (gy as f64 + 0.5) * bbox.height() / out as f64;
        let sx = bbox.x0 + (gx as f64 + 0.5) * bbox.width() / out as f64;
        if sy < 0.0 || sx < 0.0 {
            return 0.0;
        }
        let (iy, ix) = (sy as usize, sx as usize);
        if iy < h && ix < w && mask[(iy, ix)] {
            1.0
        } else {
            0.0
        }
    })
}

/// Run-length encode a boolean mask (row-major), alternating background and
/// foreground run lengths, starting with background.
pub fn rle_encode(mask: &ArrayView2<'_, bool>) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count: u32 = 0;
    for &v in mask.iter() {
        if v == current {
            count += 1;
        } else {
            runs.push(count);
            current = v;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

/// Inverse of [`rle_encode`].
pub fn rle_decode(runs: &[u32], h: usize, w: usize) -> crate::Result<Array2<bool>> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != (h * w) as u64 {
        return Err(crate::Error::Format(format!(
            "RLE covers {total} pixels, mask is {h}x{w}"
        )));
    }
    let mut flat = Vec::with_capacity(h * w);
    let mut current = false;
    for &r in runs {
        flat.extend(std::iter::repeat(current).take(r as usize));
        current = !current;
    }
    Ok(Array2::from_shape_vec((h, w), flat).expect("length checked"))
}
