//! Random patch cropping with annotation re-tightening.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::core::rng::substream_indexed;
use crate::core::types::{Domain, ImageSample, InstanceAnnotation, Split};
use crate::error::{Error, Result};

/// Crops `count` random patches. Annotations are clipped to the window and
/// re-tightened; instances cropped out entirely are dropped. Deterministic
/// in (sample id, seed, patch index).
pub fn crop_patches(
    sample: &ImageSample,
    patch_size: (usize, usize),
    count: usize,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    let (ph, pw) = patch_size;
    let (h, w, c) = sample.pixels.dim();
    if ph > h || pw > w {
        return Err(Error::Size(format!(
            "patch {ph}x{pw} exceeds image {h}x{w}"
        )));
    }
    if ph < crate::core::types::MIN_IMAGE_SIDE || pw < crate::core::types::MIN_IMAGE_SIDE {
        return Err(Error::Size(format!(
            "patch {ph}x{pw} below minimum image side"
        )));
    }
    let stream = format!("crop/{}", sample.id);
    let annotations = sample.annotations_raw();
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng = substream_indexed(seed, &stream, k as u64);
        let y0 = if h == ph { 0 } else { rng.random_range(0..=h - ph) };
        let x0 = if w == pw { 0 } else { rng.random_range(0..=w - pw) };
        let pixels = Array3::from_shape_fn((ph, pw, c), |(y, x, ch)| {
            sample.pixels[(y0 + y, x0 + x, ch)]
        });
        let cropped_anns = annotations.map(|anns| {
            anns.iter()
                .filter_map(|a| {
                    let mask = Array2::from_shape_fn((ph, pw), |(y, x)| {
                        a.mask[(y0 + y, x0 + x)]
                    });
                    if mask.iter().any(|&v| v) {
                        Some(InstanceAnnotation::from_mask(a.instance_id, mask).expect("nonempty"))
                    } else {
                        None
                    }
                })
                .collect::<Vec<_>>()
        });
        let id = format!("{}_p{:03}", sample.id, k);
        let patch = match (sample.domain, sample.is_pseudo_labelled()) {
            (Domain::Target, true) => ImageSample::with_pseudo_annotations(
                id,
                pixels,
                sample.split,
                cropped_anns.unwrap_or_default(),
            )?,
            _ => {
                // a source-train crop may lose all annotations; keep it annotated-empty
                let anns = if sample.domain == Domain::Source && sample.split == Split::Train {
                    Some(cropped_anns.unwrap_or_default())
                } else {
                    cropped_anns
                };
                ImageSample::new(id, pixels, sample.domain, sample.split, anns)?
            }
        };
        out.push(patch);
    }
    Ok(out)
}
