//! Metrics (AJI, pixel-F1, object-F1, max-IoU), rule-based mask filtering,
//! and dataset evaluation through the model.

mod filter;
mod metrics;
pub mod plots;

pub use filter::{rule_filter, RuleFilterFamily};
pub use metrics::{
    aji, aji_counts, f1_from_counts, mask_iou, max_iou, object_counts, object_f1, pixel_counts,
    pixel_f1,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::core::config::PipelineConfig;
use crate::core::guard::AccessContext;
use crate::core::maskops::paste_mask;
use crate::core::types::{Domain, ImageSample, InstancePrediction};
use crate::error::{Error, Result};
use crate::model::{encode_with_branch, predict_masks, propose_regions, ModelState};
use crate::scalar::Scalar;

pub const DEFAULT_OBJECT_F1_IOU: f64 = 0.5;
pub const DEFAULT_CONF_FLOOR: f64 = 0.5;

/// How per-image metrics are aggregated over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// Mean of per-image metric values (the default).
    PerImageMean,
    /// Counts pooled over the dataset before computing each metric.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMode {
    pub aggregate: Aggregate,
    /// Inference branch: which private encoder / mask head to use.
    pub branch: Domain,
    /// Confidence floor applied to predictions before metrics.
    pub conf_floor: f64,
    pub object_f1_iou: f64,
}

impl Default for EvalMode {
    fn default() -> Self {
        EvalMode {
            aggregate: Aggregate::PerImageMean,
            branch: Domain::Target,
            conf_floor: DEFAULT_CONF_FLOOR,
            object_f1_iou: DEFAULT_OBJECT_F1_IOU,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub aji: f64,
    pub pixel_f1: f64,
    pub object_f1: f64,
    pub max_iou: Option<f64>,
    pub n_gt: usize,
    pub n_pred: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub aji: f64,
    pub pixel_f1: f64,
    pub object_f1: f64,
    /// Present only when every image has exactly one ground-truth instance.
    pub max_iou: Option<f64>,
    pub per_image: Vec<ImageEval>,
    pub mode: EvalMode,
}

/// IoU threshold of the final suppression pass over refined boxes.
pub const FINAL_NMS_IOU: f64 = 0.2;

/// Runs branch inference on one sample: proposals from shared features, mask
/// predictions from the branch's private features, the confidence floor,
/// and a final suppression pass over the refined boxes (box refinement can
/// re-collapse distinct proposals onto one object).
pub fn infer_predictions<F: Scalar>(
    state: &ModelState<F>,
    sample: &ImageSample,
    branch: Domain,
    conf_floor: f64,
    max_n: usize,
) -> Result<Vec<InstancePrediction>> {
    let bundle = encode_with_branch(sample, state, branch)?;
    let proposals = propose_regions(&bundle.h_c, state, max_n);
    let preds = predict_masks(&bundle.h_p, &proposals, state, branch);
    let kept: Vec<InstancePrediction> = preds
        .into_iter()
        .filter(|p| p.confidence >= conf_floor)
        .collect();
    let rects: Vec<_> = kept.iter().map(|p| p.bbox).collect();
    let scores: Vec<_> = kept.iter().map(|p| p.confidence).collect();
    let keep = crate::core::geometry::nms(&rects, &scores, FINAL_NMS_IOU);
    let mut out: Vec<InstancePrediction> = keep.into_iter().map(|i| kept[i].clone()).collect();
    out.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(out)
}

/// Binarized full-image instance masks for a prediction list; predictions
/// whose pasted mask is empty are dropped.
pub fn predictions_to_masks(
    preds: &[InstancePrediction],
    h: usize,
    w: usize,
) -> Vec<Array2<bool>> {
    preds
        .iter()
        .map(|p| paste_mask(&p.mask_probs.view(), &p.bbox, h, w))
        .filter(|m| m.iter().any(|&v| v))
        .collect()
}

fn union_of(masks: &[Array2<bool>], h: usize, w: usize) -> Array2<bool> {
    let mut out = Array2::from_elem((h, w), false);
    for m in masks {
        out.zip_mut_with(m, |o, &v| *o |= v);
    }
    out
}

/// Evaluates a model over annotated samples (evaluator context).
pub fn evaluate_samples<F: Scalar>(
    state: &ModelState<F>,
    samples: &[ImageSample],
    cfg: &PipelineConfig,
    mode: EvalMode,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch("evaluate_samples".into()));
    }
    let mut per_image = Vec::new();
    let mut pooled_c = 0usize;
    let mut pooled_u = 0usize;
    let mut pooled_px = (0usize, 0usize, 0usize);
    let mut pooled_obj = (0usize, 0usize, 0usize);
    let mut all_single_gt = true;

    for sample in samples {
        let annotations = sample
            .annotations(AccessContext::Evaluator)?
            .ok_or_else(|| {
                Error::Format(format!("sample `{}` has no annotations to evaluate", sample.id))
            })?;
        let (h, w) = (sample.height(), sample.width());
        let gt: Vec<Array2<bool>> = annotations.iter().map(|a| a.mask.clone()).collect();
        let preds = infer_predictions(
            state,
            sample,
            mode.branch,
            mode.conf_floor,
            cfg.pipeline.max_detections,
        )?;
        let pred_masks = predictions_to_masks(&preds, h, w);

        let (c, u) = aji_counts(&gt, &pred_masks)?;
        let (tp, fp, fne) = pixel_counts(&union_of(&gt, h, w), &union_of(&pred_masks, h, w))?;
        let (otp, ngt, npred) = object_counts(&gt, &pred_masks, mode.object_f1_iou)?;
        pooled_c += c;
        pooled_u += u;
        pooled_px = (pooled_px.0 + tp, pooled_px.1 + fp, pooled_px.2 + fne);
        pooled_obj = (pooled_obj.0 + otp, pooled_obj.1 + ngt, pooled_obj.2 + npred);
        let image_max_iou = if gt.len() == 1 {
            Some(max_iou(&gt, &pred_masks)?)
        } else {
            all_single_gt = false;
            None
        };
        per_image.push(ImageEval {
            id: sample.id.clone(),
            aji: if u == 0 { 1.0 } else { c as f64 / u as f64 },
            pixel_f1: f1_from_counts(tp, fp, fne),
            object_f1: object_f1(&gt, &pred_masks, mode.object_f1_iou)?,
            max_iou: image_max_iou,
            n_gt: gt.len(),
            n_pred: pred_masks.len(),
        });
    }

    let n = per_image.len() as f64;
    let (aji_v, pix_v, obj_v) = match mode.aggregate {
        Aggregate::PerImageMean => (
            per_image.iter().map(|e| e.aji).sum::<f64>() / n,
            per_image.iter().map(|e| e.pixel_f1).sum::<f64>() / n,
            per_image.iter().map(|e| e.object_f1).sum::<f64>() / n,
        ),
        Aggregate::Pooled => {
            let aji_v = if pooled_u == 0 {
                1.0
            } else {
                pooled_c as f64 / pooled_u as f64
            };
            let pix_v = f1_from_counts(pooled_px.0, pooled_px.1, pooled_px.2);
            let obj_v = {
                let (tp, ngt, npred) = pooled_obj;
                if ngt == 0 && npred == 0 {
                    1.0
                } else if tp == 0 {
                    0.0
                } else {
                    let p = tp as f64 / npred as f64;
                    let r = tp as f64 / ngt as f64;
                    2.0 * p * r / (p + r)
                }
            };
            (aji_v, pix_v, obj_v)
        }
    };
    let max_iou_v = if all_single_gt {
        Some(per_image.iter().filter_map(|e| e.max_iou).sum::<f64>() / n)
    } else {
        None
    };
    Ok(EvalResult {
        aji: aji_v,
        pixel_f1: pix_v,
        object_f1: obj_v,
        max_iou: max_iou_v,
        per_image,
        mode,
    })
}
