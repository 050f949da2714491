//! On-disk dataset format.
//!
//! One directory per split. Images are 8-bit PNG (grayscale or RGB);
//! instance annotations are 16-bit single-channel PNG where the pixel value
//! is the instance id and 0 is background; `manifest.tsv` holds one
//! tab-separated record per sample: id, image path, label path or `-`,
//! domain. Pseudo-labelled samples additionally carry a JSON sidecar
//! preserving per-instance confidence, box, and the unresolved mask.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::core::geometry::RectF;
use crate::core::maskops::{rle_decode, rle_encode};
use crate::core::types::{Domain, ImageSample, InstanceAnnotation, Split};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Sidecar record for one pseudo-labelled instance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SidecarInstance {
    pub instance_id: u32,
    pub confidence: f64,
    pub bbox: RectF,
    pub mask_rle: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PseudoSidecar {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<SidecarInstance>,
}

/// Per-instance sidecar metadata keyed by (image id, instance id); the box
/// may be a non-integer prediction box, unlike the annotation's tight box.
pub type SidecarMeta = BTreeMap<(String, u32), (f64, RectF)>;

/// Writes one split directory. Ground-truth and pseudo annotations both go
/// to the 16-bit label PNG; pseudo samples also get a sidecar so overlapping
/// masks survive (the PNG resolves contested pixels by annotation order,
/// which the writer arranges as descending confidence upstream).
pub fn write_split(dir: &Path, samples: &[ImageSample]) -> Result<()> {
    write_split_with_confidence(dir, samples, &BTreeMap::new())
}

/// Like [`write_split`], with per-(image, instance) confidence and box
/// metadata recorded in pseudo sidecars.
pub fn write_split_with_confidence(
    dir: &Path,
    samples: &[ImageSample],
    meta: &SidecarMeta,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = String::new();
    for s in samples {
        let image_rel = format!("images/{}.png", s.id);
        save_pixels_png(&dir.join(&image_rel), &s.pixels)?;
        let label_rel = if let Some(anns) = s.annotations_raw() {
            let rel = format!("labels/{}.png", s.id);
            // rasterize in ascending confidence so higher confidence wins
            // contested pixels; the sidecar keeps the original order
            let mut png_order: Vec<&InstanceAnnotation> = anns.iter().collect();
            png_order.sort_by(|a, b| {
                let ca = meta
                    .get(&(s.id.clone(), a.instance_id))
                    .map(|m| m.0)
                    .unwrap_or(1.0);
                let cb = meta
                    .get(&(s.id.clone(), b.instance_id))
                    .map(|m| m.0)
                    .unwrap_or(1.0);
                ca.partial_cmp(&cb)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.instance_id.cmp(&b.instance_id))
            });
            let ordered: Vec<InstanceAnnotation> = png_order.into_iter().cloned().collect();
            save_label_png(&dir.join(&rel), &ordered, s.height(), s.width())?;
            if s.is_pseudo_labelled() {
                let sidecar = PseudoSidecar {
                    image_id: s.id.clone(),
                    height: s.height(),
                    width: s.width(),
                    instances: anns
                        .iter()
                        .map(|a| {
                            let (confidence, bbox) = meta
                                .get(&(s.id.clone(), a.instance_id))
                                .copied()
                                .unwrap_or((1.0, a.bbox.to_rect()));
                            SidecarInstance {
                                instance_id: a.instance_id,
                                confidence,
                                bbox,
                                mask_rle: rle_encode(&a.mask.view()),
                            }
                        })
                        .collect(),
                };
                let sidecar_path = dir.join(format!("labels/{}.pseudo.json", s.id));
                std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
            }
            rel
        } else {
            "-".to_string()
        };
        manifest.push_str(&format!("{}\t{}\t{}\t{}\n", s.id, image_rel, label_rel, s.domain));
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// Reads one split directory back into samples. Target ground truth loads as
/// eval-only; the presence of a pseudo sidecar marks annotations as pseudo
/// (and reconstructs exact masks from the sidecar RLE).
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<ImageSample>> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_NAME))
        .map_err(|e| Error::Format(format!("missing {MANIFEST_NAME} in {dir:?}: {e}")))?;
    let mut out = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "manifest line {} has {} fields, expected 4",
                lineno + 1,
                fields.len()
            )));
        }
        let (id, image_rel, label_rel, domain_s) =
            (fields[0], fields[1], fields[2], fields[3]);
        let domain: Domain = domain_s.parse()?;
        let pixels = load_pixels_png(&dir.join(image_rel))?;
        let (h, w, _) = pixels.dim();

        let sample = if label_rel == "-" {
            ImageSample::new(id, pixels, domain, split, None)?
        } else {
            let sidecar_file = dir
                .join(Path::new(label_rel).parent().unwrap_or(Path::new("")))
                .join(format!("{}.pseudo.json", file_stem(label_rel)));
            if sidecar_file.exists() {
                let sidecar: PseudoSidecar =
                    serde_json::from_str(&std::fs::read_to_string(&sidecar_file)?)?;
                let mut anns = Vec::new();
                for inst in &sidecar.instances {
                    let mask = rle_decode(&inst.mask_rle, h, w)?;
                    anns.push(InstanceAnnotation::from_mask(inst.instance_id, mask)?);
                }
                ImageSample::with_pseudo_annotations(id, pixels, split, anns)?
            } else {
                let anns = load_label_png(&dir.join(label_rel))?;
                ImageSample::new(id, pixels, domain, split, Some(anns))?
            }
        };
        out.push(sample);
    }
    Ok(out)
}

/// Reads the sidecar confidences of a pseudo-labelled split.
pub fn read_confidences(dir: &Path) -> Result<BTreeMap<(String, u32), f64>> {
    let mut out = BTreeMap::new();
    let labels = dir.join("labels");
    if !labels.is_dir() {
        return Ok(out);
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&labels)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".pseudo.json"))
        .collect();
    entries.sort();
    for path in entries {
        let sidecar: PseudoSidecar = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        for inst in sidecar.instances {
            out.insert((sidecar.image_id.clone(), inst.instance_id), inst.confidence);
        }
    }
    Ok(out)
}

fn file_stem(rel: &str) -> String {
    Path::new(rel)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// 8-bit PNG writer for `H x W x C` pixel arrays with `C` in `{1, 3}`.
pub fn save_pixels_png(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    match c {
        1 => {
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                Luma([pixels[(y as usize, x as usize, 0)]])
            });
            img.save(path)?;
        }
        3 => {
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                Rgb([
                    pixels[(y as usize, x as usize, 0)],
                    pixels[(y as usize, x as usize, 1)],
                    pixels[(y as usize, x as usize, 2)],
                ])
            });
            img.save(path)?;
        }
        other => {
            return Err(Error::Format(format!(
                "unsupported channel count {other}; expected 1 or 3"
            )))
        }
    }
    Ok(())
}

pub fn load_pixels_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)?;
    let out = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
                g.get_pixel(x as u32, y as u32)[0]
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                rgb.get_pixel(x as u32, y as u32)[c]
            })
        }
    };
    Ok(out)
}

/// 16-bit single-channel label PNG: pixel value = instance id, 0 = background.
/// Later annotations win contested pixels, so callers order by ascending
/// priority (the pseudo-label writer orders by ascending confidence upstream).
pub fn save_label_png(
    path: &Path,
    annotations: &[InstanceAnnotation],
    h: usize,
    w: usize,
) -> Result<()> {
    let mut label = Array2::<u16>::zeros((h, w));
    for a in annotations {
        if a.instance_id > u16::MAX as u32 {
            return Err(Error::Format(format!(
                "instance_id {} exceeds 16-bit label format",
                a.instance_id
            )));
        }
        for ((y, x), &v) in a.mask.indexed_iter() {
            if v {
                label[(y, x)] = a.instance_id as u16;
            }
        }
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([label[(y as usize, x as usize)]])
        });
    img.save(path)?;
    Ok(())
}

pub fn load_label_png(path: &Path) -> Result<Vec<InstanceAnnotation>> {
    let img = image::open(path)?;
    let g16 = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => other.to_luma16(),
    };
    let (w, h) = g16.dimensions();
    let mut by_id: BTreeMap<u16, Array2<bool>> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let id = g16.get_pixel(x, y)[0];
            if id != 0 {
                by_id
                    .entry(id)
                    .or_insert_with(|| Array2::from_elem((h as usize, w as usize), false))
                    [(y as usize, x as usize)] = true;
            }
        }
    }
    by_id
        .into_iter()
        .map(|(id, mask)| InstanceAnnotation::from_mask(id as u32, mask))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::guard::AccessContext;
    use ndarray::Array3;

    fn sample_with_annotations(id: &str, domain: Domain) -> ImageSample {
        let mut pixels = Array3::<u8>::zeros((16, 20, 1));
        pixels[(3, 4, 0)] = 200;
        let mut mask = Array2::from_elem((16, 20), false);
        mask[(3, 4)] = true;
        mask[(4, 5)] = true;
        let ann = InstanceAnnotation::from_mask(3, mask).unwrap();
        ImageSample::new(id, pixels, domain, Split::Train, Some(vec![ann])).unwrap()
    }

    #[test]
    fn split_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s1 = sample_with_annotations("img_000", Domain::Source);
        let s2 = sample_with_annotations("img_001", Domain::Target);
        write_split(dir.path(), &[s1.clone(), s2.clone()]).unwrap();
        let back = read_split(dir.path(), Split::Train).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].pixels, s1.pixels);
        assert_eq!(back[0].id, s1.id);
        let anns = back[0]
            .annotations(AccessContext::Evaluator)
            .unwrap()
            .unwrap();
        let orig = s1.annotations(AccessContext::Evaluator).unwrap().unwrap();
        assert_eq!(anns.len(), orig.len());
        assert_eq!(anns[0].instance_id, orig[0].instance_id);
        assert_eq!(anns[0].mask, orig[0].mask);
        assert_eq!(anns[0].bbox, orig[0].bbox);
        // target ground truth is guarded after the round trip
        assert!(back[1].annotations(AccessContext::Trainer).is_err());
    }
}
