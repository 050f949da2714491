//! Photometric augmentation: Gaussian blur followed by contrast/brightness.
//! Geometry never changes, so annotations stay pixel-aligned.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::core::config::PipelineConfig;
use crate::core::types::ImageSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub blur_sigma: f64,
    pub contrast_scale: f64,
    /// Raw pixel units on the [0,255] scale.
    pub brightness_delta: f64,
}

impl AugmentationParams {
    pub fn identity() -> Self {
        AugmentationParams {
            blur_sigma: 0.0,
            contrast_scale: 1.0,
            brightness_delta: 0.0,
        }
    }

    pub fn from_config(cfg: &PipelineConfig) -> Self {
        AugmentationParams {
            blur_sigma: cfg.pipeline.blur_sigma,
            contrast_scale: cfg.pipeline.contrast_scale,
            brightness_delta: cfg.pipeline.brightness_delta,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.blur_sigma == 0.0 && self.contrast_scale == 1.0 && self.brightness_delta == 0.0
    }
}

/// Inverts each channel value `v -> 255 - v`; annotations unchanged.
pub fn invert_intensity(sample: &ImageSample) -> ImageSample {
    sample.with_pixels(sample.pixels.mapv(|v| 255 - v))
}

/// Applies Gaussian blur (kernel radius `ceil(3 sigma)`, reflected borders),
/// then `v -> clamp(scale * v + delta, 0, 255)`. The photometric pipeline is
/// deterministic; `_seed` is part of the interface for parity with the other
/// data ops.
pub fn augment(sample: &ImageSample, params: &AugmentationParams, _seed: u64) -> ImageSample {
    let (h, w, c) = sample.pixels.dim();
    let mut buf = sample.pixels.mapv(|v| v as f32);
    if params.blur_sigma > 0.0 {
        buf = gaussian_blur(&buf, params.blur_sigma);
    }
    let scale = params.contrast_scale as f32;
    let delta = params.brightness_delta as f32;
    let out = Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        (scale * buf[(y, x, ch)] + delta).round().clamp(0.0, 255.0) as u8
    });
    sample.with_pixels(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mirror-without-repeat border index (…2 1 0 | 0' is excluded … n-2 n-1 | n-2…).
fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_blur(buf: &Array3<f32>, sigma: f64) -> Array3<f32> {
    let (h, w, c) = buf.dim();
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let mut tmp = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let xi = reflect(x as i64 + j as i64 - radius, w as i64);
                    acc += kv * buf[(y, xi, ch)];
                }
                tmp[(y, x, ch)] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let yi = reflect(y as i64 + j as i64 - radius, h as i64);
                    acc += kv * tmp[(yi, x, ch)];
                }
                out[(y, x, ch)] = acc;
            }
        }
    }
    out
}
