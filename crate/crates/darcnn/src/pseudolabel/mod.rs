//! Stage-2 pseudo-labelling: confidence-thresholded predictions from a
//! completed stage-1 model become a supervised training set for the target
//! branch, paired with photometric augmentation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::core::config::{AugPlacement, PipelineConfig};
use crate::core::dataset::{read_confidences, read_split, write_split_with_confidence};
use crate::core::geometry::RectF;
use crate::core::maskops::paste_mask;
use crate::core::types::{Domain, ImageSample, InstanceAnnotation, Split};
use crate::data::{augment, AugmentationParams};
use crate::error::{Error, Result};
use crate::eval::infer_predictions;
use crate::model::ModelState;
use crate::scalar::Scalar;

/// One retained pseudo instance: binarized mask, the prediction's box, and
/// its confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoInstance {
    pub instance_id: u32,
    pub mask: Array2<bool>,
    pub bbox: RectF,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoImageLabels {
    pub image_id: String,
    pub instances: Vec<PseudoInstance>,
}

/// Where the labels came from: enough to regenerate or audit them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_hash: String,
    pub z_threshold: f64,
    pub augmentation: AugmentationParams,
    pub generation_seed: u64,
    pub aug_mode: AugPlacement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub provenance: Provenance,
    pub per_image: Vec<PseudoImageLabels>,
}

impl PseudoLabelSet {
    pub fn total_instances(&self) -> usize {
        self.per_image.iter().map(|p| p.instances.len()).sum()
    }
}

/// Runs target-branch inference on the target images and keeps predictions
/// with confidence >= z, binarizing masks at probability 0.5. Depending on
/// the augmentation placement mode, inference sees clean images
/// (`train_augmented`) or augmented ones (`label_augmented`, `both`).
/// Deterministic given (model, images, config, seed).
pub fn generate_pseudo_labels<F: Scalar>(
    state: &ModelState<F>,
    target_images: &[ImageSample],
    cfg: &PipelineConfig,
    seed: u64,
    checkpoint_hash: &str,
) -> Result<PseudoLabelSet> {
    let z = cfg.pipeline.z_pseudo_conf;
    let params = AugmentationParams::from_config(cfg);
    let mode = cfg.stage2.aug_mode;
    let mut per_image = Vec::new();
    for sample in target_images {
        if sample.domain != Domain::Target {
            return Err(Error::Consistency(format!(
                "pseudo-labelling expects target images, got {} for `{}`",
                sample.domain, sample.id
            )));
        }
        let inference_view = match mode {
            AugPlacement::TrainAugmented => sample.clone(),
            AugPlacement::LabelAugmented | AugPlacement::Both => augment(sample, &params, seed),
        };
        let preds = infer_predictions(
            state,
            &inference_view,
            Domain::Target,
            z,
            cfg.pipeline.max_detections,
        )?;
        let (h, w) = (sample.height(), sample.width());
        let mut instances = Vec::new();
        for p in preds {
            debug_assert!(p.confidence >= z);
            let mask = paste_mask(&p.mask_probs.view(), &p.bbox, h, w);
            if mask.iter().any(|&v| v) {
                instances.push(PseudoInstance {
                    instance_id: instances.len() as u32 + 1,
                    mask,
                    bbox: p.bbox,
                    confidence: p.confidence,
                });
            }
        }
        per_image.push(PseudoImageLabels {
            image_id: sample.id.clone(),
            instances,
        });
    }
    let set = PseudoLabelSet {
        provenance: Provenance {
            checkpoint_hash: checkpoint_hash.to_string(),
            z_threshold: z,
            augmentation: params,
            generation_seed: seed,
            aug_mode: mode,
        },
        per_image,
    };
    if set.total_instances() == 0 {
        return Err(Error::EmptyPseudoLabel(format!(
            "no prediction reached confidence {z} on {} images",
            target_images.len()
        )));
    }
    Ok(set)
}

/// Pairs images with their pseudo-labels as a supervised training set. Under
/// `train_augmented` and `both` the training pixels are augmented copies
/// (labels keep the geometry of the generation pass, which photometric
/// augmentation never moves); under `label_augmented` training pixels stay
/// clean. Annotations are flagged pseudo, exempting them from the target
/// read guard.
pub fn build_stage2_dataset(
    labels: &PseudoLabelSet,
    images: &[ImageSample],
    params: &AugmentationParams,
    mode: AugPlacement,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    let by_id: BTreeMap<&str, &PseudoImageLabels> = labels
        .per_image
        .iter()
        .map(|p| (p.image_id.as_str(), p))
        .collect();
    let mut out = Vec::new();
    for sample in images {
        let Some(entry) = by_id.get(sample.id.as_str()) else {
            return Err(Error::Consistency(format!(
                "no pseudo-labels for image `{}`",
                sample.id
            )));
        };
        let pixels_src = match mode {
            AugPlacement::TrainAugmented | AugPlacement::Both => augment(sample, params, seed),
            AugPlacement::LabelAugmented => sample.clone(),
        };
        let annotations: Vec<InstanceAnnotation> = entry
            .instances
            .iter()
            .map(|inst| InstanceAnnotation::from_mask(inst.instance_id, inst.mask.clone()))
            .collect::<Result<_>>()?;
        out.push(ImageSample::with_pseudo_annotations(
            sample.id.clone(),
            pixels_src.pixels,
            Split::Train,
            annotations,
        )?);
    }
    if out.len() != labels.per_image.len() {
        return Err(Error::Consistency(format!(
            "pseudo-labels cover {} images but {} were supplied",
            labels.per_image.len(),
            out.len()
        )));
    }
    Ok(out)
}

const PROVENANCE_FILE: &str = "provenance.json";

/// Writes the pseudo-label set next to the clean target images in the core
/// dataset format: label PNG (written in ascending-confidence order so
/// higher confidence wins contested pixels), JSON sidecar preserving the
/// unresolved masks, manifest, and a provenance file.
pub fn save_pseudo_labels(
    dir: &Path,
    labels: &PseudoLabelSet,
    images: &[ImageSample],
) -> Result<()> {
    let by_id: BTreeMap<&str, &ImageSample> =
        images.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut samples = Vec::new();
    let mut meta = crate::core::dataset::SidecarMeta::new();
    for entry in &labels.per_image {
        let Some(src) = by_id.get(entry.image_id.as_str()) else {
            return Err(Error::Consistency(format!(
                "pseudo-labels reference unknown image `{}`",
                entry.image_id
            )));
        };
        let annotations: Vec<InstanceAnnotation> = entry
            .instances
            .iter()
            .map(|i| InstanceAnnotation::from_mask(i.instance_id, i.mask.clone()))
            .collect::<Result<_>>()?;
        for inst in &entry.instances {
            meta.insert(
                (entry.image_id.clone(), inst.instance_id),
                (inst.confidence, inst.bbox),
            );
        }
        samples.push(ImageSample::with_pseudo_annotations(
            entry.image_id.clone(),
            src.pixels.clone(),
            Split::Train,
            annotations,
        )?);
    }
    write_split_with_confidence(dir, &samples, &meta)?;
    std::fs::write(
        dir.join(PROVENANCE_FILE),
        serde_json::to_string_pretty(&labels.provenance)?,
    )?;
    Ok(())
}

/// Reads back a pseudo-label directory: the exact label set (masks from the
/// sidecar RLE, boxes and confidences from the sidecar) plus the stored
/// images.
pub fn load_pseudo_labels(dir: &Path) -> Result<(PseudoLabelSet, Vec<ImageSample>)> {
    let provenance: Provenance = serde_json::from_str(
        &std::fs::read_to_string(dir.join(PROVENANCE_FILE))
            .map_err(|e| Error::Format(format!("missing {PROVENANCE_FILE}: {e}")))?,
    )?;
    let samples = read_split(dir, Split::Train)?;
    let confidences = read_confidences(dir)?;
    let sidecars = read_sidecar_boxes(dir)?;
    let mut per_image = Vec::new();
    for s in &samples {
        let anns = s
            .annotations(crate::core::guard::AccessContext::Trainer)?
            .unwrap_or(&[]);
        let instances = anns
            .iter()
            .map(|a| {
                let key = (s.id.clone(), a.instance_id);
                PseudoInstance {
                    instance_id: a.instance_id,
                    mask: a.mask.clone(),
                    bbox: sidecars
                        .get(&key)
                        .copied()
                        .unwrap_or_else(|| a.bbox.to_rect()),
                    confidence: confidences.get(&key).copied().unwrap_or(1.0),
                }
            })
            .collect();
        per_image.push(PseudoImageLabels {
            image_id: s.id.clone(),
            instances,
        });
    }
    Ok((
        PseudoLabelSet {
            provenance,
            per_image,
        },
        samples,
    ))
}

fn read_sidecar_boxes(dir: &Path) -> Result<BTreeMap<(String, u32), RectF>> {
    let mut out = BTreeMap::new();
    let labels = dir.join("labels");
    if !labels.is_dir() {
        return Ok(out);
    }
    let mut entries: Vec<_> = std::fs::read_dir(&labels)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".pseudo.json"))
        .collect();
    entries.sort();
    for path in entries {
        let sidecar: crate::core::dataset::PseudoSidecar =
            serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        for inst in sidecar.instances {
            out.insert((sidecar.image_id.clone(), inst.instance_id), inst.bbox);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticDomainSpec};
    use crate::model::ModelState;

    fn cfg() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.pipeline.feature_depth = 8;
        cfg.model.stage_widths = vec![8, 8];
        cfg
    }

    /// Untrained mask heads can emit all-background masks; bias toward
    /// foreground so label sets are nonempty.
    fn seeded_state(cfg: &PipelineConfig) -> ModelState<f32> {
        let mut state = ModelState::<f32>::new(cfg).unwrap();
        state.model.m_t.mask_out.b.fill(0.3);
        state
    }

    fn target_images(n: usize, seed: u64) -> Vec<ImageSample> {
        let spec = SyntheticDomainSpec::target_blobs((64, 64));
        generate_synthetic(&spec, n, seed, Split::Train).unwrap()
    }

    #[test]
    fn retention_respects_z_and_is_monotone() {
        let cfg = cfg();
        let state = seeded_state(&cfg);
        let images = target_images(3, 9);
        let mut low = cfg.clone();
        low.pipeline.z_pseudo_conf = 0.0;
        let all = generate_pseudo_labels(&state, &images, &low, 0, "ck").unwrap();
        assert!(all.total_instances() > 0);

        let mut prev = usize::MAX;
        for z in [0.0, 0.3, 0.5, 0.7] {
            let mut c = cfg.clone();
            c.pipeline.z_pseudo_conf = z;
            let n = match generate_pseudo_labels(&state, &images, &c, 0, "ck") {
                Ok(set) => {
                    for img in &set.per_image {
                        for inst in &img.instances {
                            assert!(inst.confidence >= z);
                        }
                    }
                    set.total_instances()
                }
                Err(Error::EmptyPseudoLabel(_)) => 0,
                Err(e) => panic!("{e}"),
            };
            assert!(n <= prev, "raising z must not increase retention");
            prev = n;
        }
    }

    #[test]
    fn starved_threshold_is_an_error() {
        let cfg = {
            let mut c = cfg();
            c.pipeline.z_pseudo_conf = 0.9999999;
            c
        };
        let state = ModelState::<f32>::new(&cfg).unwrap();
        let images = target_images(2, 10);
        assert!(matches!(
            generate_pseudo_labels(&state, &images, &cfg, 0, "ck"),
            Err(Error::EmptyPseudoLabel(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let mut cfg = cfg();
        cfg.pipeline.z_pseudo_conf = 0.0;
        let state = seeded_state(&cfg);
        let images = target_images(2, 11);
        let a = generate_pseudo_labels(&state, &images, &cfg, 7, "ck").unwrap();
        let b = generate_pseudo_labels(&state, &images, &cfg, 7, "ck").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stage2_dataset_pairs_augmented_pixels_with_clean_labels() {
        let mut cfg = cfg();
        cfg.pipeline.z_pseudo_conf = 0.0;
        let state = seeded_state(&cfg);
        let images = target_images(2, 12);
        let labels = generate_pseudo_labels(&state, &images, &cfg, 0, "ck").unwrap();
        let params = AugmentationParams::from_config(&cfg);
        let ds = build_stage2_dataset(&labels, &images, &params, AugPlacement::TrainAugmented, 0)
            .unwrap();
        assert_eq!(ds.len(), 2);
        for (s, orig) in ds.iter().zip(images.iter()) {
            // pixels changed, masks identical to the label set
            assert_ne!(s.pixels, orig.pixels);
            assert!(s.is_pseudo_labelled());
            let anns = s
                .annotations(crate::core::guard::AccessContext::Trainer)
                .unwrap()
                .unwrap();
            let entry = labels
                .per_image
                .iter()
                .find(|p| p.image_id == s.id)
                .unwrap();
            assert_eq!(anns.len(), entry.instances.len());
            for (a, inst) in anns.iter().zip(entry.instances.iter()) {
                assert_eq!(a.mask, inst.mask);
            }
        }
        // identity augmentation reproduces the clean images
        let id = build_stage2_dataset(
            &labels,
            &images,
            &AugmentationParams::identity(),
            AugPlacement::TrainAugmented,
            0,
        )
        .unwrap();
        for (s, orig) in id.iter().zip(images.iter()) {
            assert_eq!(s.pixels, orig.pixels);
        }
    }

    #[test]
    fn label_image_mismatch_is_a_consistency_error() {
        let mut cfg = cfg();
        cfg.pipeline.z_pseudo_conf = 0.0;
        let state = seeded_state(&cfg);
        let images = target_images(2, 13);
        let labels = generate_pseudo_labels(&state, &images, &cfg, 0, "ck").unwrap();
        let other = target_images(1, 99);
        assert!(matches!(
            build_stage2_dataset(
                &labels,
                &other,
                &AugmentationParams::identity(),
                AugPlacement::TrainAugmented,
                0
            ),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let mut cfg = cfg();
        cfg.pipeline.z_pseudo_conf = 0.0;
        let state = seeded_state(&cfg);
        let images = target_images(2, 14);
        let labels = generate_pseudo_labels(&state, &images, &cfg, 3, "ckhash123").unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_pseudo_labels(dir.path(), &labels, &images).unwrap();
        let (back, stored_images) = load_pseudo_labels(dir.path()).unwrap();
        assert_eq!(back, labels);
        assert_eq!(stored_images.len(), images.len());
        for (a, b) in stored_images.iter().zip(images.iter()) {
            assert_eq!(a.pixels, b.pixels);
        }
    }
}
