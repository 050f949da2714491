//! Synthetic dual-domain data.
//!
//! `source_shapes` stands in for a COCO-like domain: crisp bright polygons
//! and disks over a split background with per-side gradients. `target_blobs`
//! stands in for a biomedical-like domain: soft-edged ellipses over a
//! homogeneous textured background. Generation is a pure function of
//! (spec, count, seed); each image draws from its own indexed substream so
//! parallel and serial generation agree.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::core::dataset::write_split;
use crate::core::rng::substream_indexed;
use crate::core::types::{Domain, ImageSample, InstanceAnnotation, Split};
use crate::error::{Error, Result};

const PLACEMENT_RETRIES: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    SourceShapes,
    TargetBlobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    SplitGradient,
    HomogeneousTextured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    #[serde(default = "default_spec_version")]
    pub version: u32,
    pub kind: DomainKind,
    pub image_size: (usize, usize),
    pub instances_min: usize,
    pub instances_max: usize,
    pub background: Background,
    pub noise_std: f64,
    #[serde(default)]
    pub invert_intensity: bool,
}

fn default_spec_version() -> u32 {
    1
}

impl SyntheticDomainSpec {
    pub fn source_shapes(image_size: (usize, usize)) -> Self {
        SyntheticDomainSpec {
            version: 1,
            kind: DomainKind::SourceShapes,
            image_size,
            instances_min: 2,
            instances_max: 4,
            background: Background::SplitGradient,
            noise_std: 3.0,
            invert_intensity: false,
        }
    }

    pub fn target_blobs(image_size: (usize, usize)) -> Self {
        SyntheticDomainSpec {
            version: 1,
            kind: DomainKind::TargetBlobs,
            image_size,
            instances_min: 2,
            instances_max: 4,
            background: Background::HomogeneousTextured,
            noise_std: 5.0,
            invert_intensity: false,
        }
    }

    pub fn domain(&self) -> Domain {
        match self.kind {
            DomainKind::SourceShapes => Domain::Source,
            DomainKind::TargetBlobs => Domain::Target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances_min == 0 || self.instances_min > self.instances_max {
            return Err(Error::Config(vec![
                "instances range must be nonempty and positive".into(),
            ]));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config(vec!["noise_std must be nonnegative".into()]));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: SyntheticDomainSpec = toml::from_str(&text)
            .map_err(|e| Error::Format(format!("domain spec parse error: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(
            path,
            toml::to_string_pretty(self).expect("spec serializes"),
        )?;
        Ok(())
    }
}

/// Split sizes written by [`generate_dataset`].
#[derive(Debug, Clone, Copy)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// Default sizing rule from a train count.
    pub fn from_train(train: usize) -> Self {
        let side = (train / 8).max(8);
        SplitCounts {
            train,
            val: side,
            test: side,
        }
    }
}

/// Generates `count` samples for one split, deterministically in
/// (spec, count, seed). Sample `k` of a split draws from the substream
/// `synth/<kind>/<split>` at index `k`.
pub fn generate_synthetic(
    spec: &SyntheticDomainSpec,
    count: usize,
    seed: u64,
    split: Split,
) -> Result<Vec<ImageSample>> {
    if count == 0 {
        return Err(Error::Generation("count must be positive".into()));
    }
    spec.validate()?;
    let stream_name = format!("synth/{:?}/{}", spec.kind, split);
    (0..count)
        .map(|k| {
            let mut rng = substream_indexed(seed, &stream_name, k as u64);
            generate_one(spec, split, k, &mut rng)
        })
        .collect()
}

/// Generates train/val/test splits and writes them under `out`.
pub fn generate_dataset(
    spec: &SyntheticDomainSpec,
    counts: SplitCounts,
    seed: u64,
    out: &Path,
) -> Result<()> {
    for (split, count) in [
        (Split::Train, counts.train),
        (Split::Val, counts.val),
        (Split::Test, counts.test),
    ] {
        let samples = generate_synthetic(spec, count, seed, split)?;
        write_split(&out.join(split.to_string()), &samples)?;
    }
    spec.save(&out.join("domain_spec.toml"))?;
    Ok(())
}

fn generate_one(
    spec: &SyntheticDomainSpec,
    split: Split,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ImageSample> {
    let (h, w) = spec.image_size;
    let mut canvas = match spec.background {
        Background::SplitGradient => split_gradient_background(h, w, rng),
        Background::HomogeneousTextured => {
            Array2::from_elem((h, w), rng.random_range(170.0..205.0_f32))
        }
    };

    let n_instances = rng.random_range(spec.instances_min..=spec.instances_max);
    let mut occupied = Array2::from_elem((h, w), false);
    let mut annotations = Vec::new();
    for inst in 0..n_instances {
        let mask = match spec.kind {
            DomainKind::SourceShapes => place_shape(&mut canvas, &occupied, rng)?,
            DomainKind::TargetBlobs => place_blob(&mut canvas, &occupied, rng)?,
        };
        occupied.zip_mut_with(&mask, |o, &m| *o |= m);
        annotations.push(InstanceAnnotation::from_mask(inst as u32 + 1, mask)?);
    }

    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
        canvas.mapv_inplace(|v| v + normal.sample(rng) as f32);
    }

    let mut pixels = Array3::from_shape_fn((h, w, 1), |(y, x, _)| {
        canvas[(y, x)].round().clamp(0.0, 255.0) as u8
    });
    if spec.invert_intensity {
        pixels.mapv_inplace(|v| 255 - v);
    }

    let id = format!("{}_{}_{:05}", kind_slug(spec.kind), split, index);
    ImageSample::new(id, pixels, spec.domain(), split, Some(annotations))
}

fn kind_slug(kind: DomainKind) -> &'static str {
    match kind {
        DomainKind::SourceShapes => "shapes",
        DomainKind::TargetBlobs => "blobs",
    }
}

/// Two regions with distinct base intensities and a mild linear gradient,
/// split along a random horizontal or vertical line.
fn split_gradient_background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let vertical = rng.random_bool(0.5);
    let extent = if vertical { w } else { h };
    let split_at = rng.random_range((extent as f64 * 0.35) as usize..(extent as f64 * 0.65) as usize);
    let base_a = rng.random_range(40.0..90.0_f32);
    let base_b = rng.random_range(100.0..150.0_f32);
    let slope_a = rng.random_range(-30.0..30.0_f32);
    let slope_b = rng.random_range(-30.0..30.0_f32);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let pos = if vertical { x } else { y };
        let within = pos as f32 / extent as f32;
        if pos < split_at {
            base_a + slope_a * within
        } else {
            base_b + slope_b * within
        }
    })
}

/// Bright crisp shape (rectangle, disk, or triangle); rejects placements that
/// touch an existing instance.
fn place_shape(
    canvas: &mut Array2<f32>,
    occupied: &Array2<bool>,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<bool>> {
    let (h, w) = canvas.dim();
    for _ in 0..PLACEMENT_RETRIES {
        let size = rng.random_range(10..=22.min(h.min(w) - 2));
        let cy = rng.random_range(1 + size / 2..h - 1 - size / 2);
        let cx = rng.random_range(1 + size / 2..w - 1 - size / 2);
        let kind = rng.random_range(0..3u8);
        let intensity = rng.random_range(185.0..245.0_f32);
        let mut mask = Array2::from_elem((h, w), false);
        match kind {
            0 => {
                let sh = size.max(4) / 2;
                let sw = (rng.random_range(6..=size.max(6))).max(4) / 2;
                for y in cy - sh..=cy + sh {
                    for x in cx - sw..=cx + sw {
                        mask[(y, x)] = true;
                    }
                }
            }
            1 => {
                let r = (size / 2) as f64;
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f64 - cy as f64;
                        let dx = x as f64 - cx as f64;
                        if dy * dy + dx * dx <= r * r {
                            mask[(y, x)] = true;
                        }
                    }
                }
            }
            _ => {
                // axis-aligned isoceles triangle in one of four orientations
                let half = (size / 2) as isize;
                let orient = rng.random_range(0..4u8);
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (a, b) = match orient {
                            0 => (dy, dx),
                            1 => (-dy, dx),
                            2 => (dx, dy),
                            _ => (-dx, dy),
                        };
                        // apex at a = -half, base at a = +half
                        let span = ((a + half) / 2).max(0);
                        if b.abs() <= span {
                            let (y, x) = (cy as isize + dy, cx as isize + dx);
                            mask[(y as usize, x as usize)] = true;
                        }
                    }
                }
            }
        }
        if mask.iter().zip(occupied.iter()).any(|(&m, &o)| m && o) {
            continue;
        }
        if !mask.iter().any(|&m| m) {
            continue;
        }
        for ((y, x), &m) in mask.indexed_iter() {
            if m {
                canvas[(y, x)] = intensity;
            }
        }
        return Ok(mask);
    }
    Err(Error::Generation(format!(
        "could not place a shape after {PLACEMENT_RETRIES} retries"
    )))
}

/// Soft-edged ellipse with random eccentricity and rotation; the instance
/// mask is the hard ellipse interior.
fn place_blob(
    canvas: &mut Array2<f32>,
    occupied: &Array2<bool>,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<bool>> {
    let (h, w) = canvas.dim();
    for _ in 0..PLACEMENT_RETRIES {
        let a = rng.random_range(4.5..9.0_f64);
        let b = a * rng.random_range(0.5..1.0_f64);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let margin = a.ceil() as usize + 2;
        if 2 * margin + 2 >= h || 2 * margin + 2 >= w {
            return Err(Error::Generation("image too small for blob".into()));
        }
        let cy = rng.random_range(margin..h - margin) as f64;
        let cx = rng.random_range(margin..w - margin) as f64;
        let intensity = rng.random_range(215.0..250.0_f32);
        let softness = 0.2;

        let (st, ct) = (theta.sin(), theta.cos());
        let mut mask = Array2::from_elem((h, w), false);
        let mut touched = false;
        let mut conflict = false;
        let reach = (a + 4.0).ceil() as isize;
        let mut blend: Vec<(usize, usize, f32)> = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let y = cy as isize + dy;
                let x = cx as isize + dx;
                if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
                    continue;
                }
                let fy = y as f64 + 0.5 - cy;
                let fx = x as f64 + 0.5 - cx;
                let u = (fx * ct + fy * st) / a;
                let v = (-fx * st + fy * ct) / b;
                let r = (u * u + v * v).sqrt();
                if r <= 1.0 {
                    mask[(y as usize, x as usize)] = true;
                    touched = true;
                    if occupied[(y as usize, x as usize)] {
                        conflict = true;
                    }
                }
                // soft edge: blend toward the blob intensity near the rim
                let t = 1.0 / (1.0 + ((r - 1.0) / softness).exp());
                if t > 0.01 {
                    blend.push((y as usize, x as usize, t as f32));
                }
            }
        }
        if conflict || !touched {
            continue;
        }
        for (y, x, t) in blend {
            canvas[(y, x)] = canvas[(y, x)] * (1.0 - t) + intensity * t;
        }
        return Ok(mask);
    }
    Err(Error::Generation(format!(
        "could not place a blob after {PLACEMENT_RETRIES} retries"
    )))
}
