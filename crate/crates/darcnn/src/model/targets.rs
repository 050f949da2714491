//! Training-target assembly: anchor matching for the region proposer and
//! region/mask targets for the second-step heads.
//!
//! Selection is randomized through an explicit RNG and never depends on the
//! current parameter values, so losses built from these targets stay smooth
//! under parameter perturbation.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::core::geometry::{encode_deltas, RectF};
use crate::core::maskops::rasterize_to_grid;
use crate::core::types::{InstanceAnnotation, RegionProposal};
use crate::model::anchors::AnchorSet;
use crate::model::net::MASK_GRID;

pub const ANCHOR_POS_IOU: f64 = 0.7;
pub const ANCHOR_NEG_IOU: f64 = 0.3;
pub const REGION_POS_IOU: f64 = 0.5;

/// Sampled anchors and regression targets for one image.
#[derive(Debug, Clone)]
pub struct AnchorTargets {
    /// Flat anchor indices labelled positive.
    pub positives: Vec<usize>,
    /// Flat anchor indices labelled negative.
    pub negatives: Vec<usize>,
    /// Box delta targets, parallel to `positives`.
    pub box_deltas: Vec<[f64; 4]>,
}

/// Matches anchors to ground-truth boxes (feature-grid units): IoU >= 0.7 is
/// positive, <= 0.3 negative, in-between ignored; the best anchor of every
/// ground truth is forced positive. At most `max_total` anchors are kept,
/// positives capped at half.
pub fn match_anchors(
    anchors: &AnchorSet,
    gt_boxes: &[RectF],
    rng: &mut ChaCha8Rng,
    max_total: usize,
) -> AnchorTargets {
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    for (ai, rect) in anchors.rects.iter().enumerate() {
        for (gi, gt) in gt_boxes.iter().enumerate() {
            let iou = rect.iou(gt);
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                best_gt[ai] = gi;
            }
        }
    }

    let mut positive = vec![false; n];
    for (ai, &iou) in best_iou.iter().enumerate() {
        if iou >= ANCHOR_POS_IOU {
            positive[ai] = true;
        }
    }
    // force-match the best anchor per ground truth
    for (gi, gt) in gt_boxes.iter().enumerate() {
        let mut best = (0usize, -1.0f64);
        for (ai, rect) in anchors.rects.iter().enumerate() {
            let iou = rect.iou(gt);
            if iou > best.1 {
                best = (ai, iou);
            }
        }
        if best.1 > 0.0 {
            positive[best.0] = true;
            if best.1 > best_iou[best.0] || best_gt[best.0] == usize::MAX {
                best_gt[best.0] = gi;
                best_iou[best.0] = best.1;
            }
        }
    }

    let mut pos: Vec<usize> = (0..n).filter(|&ai| positive[ai]).collect();
    let mut neg: Vec<usize> = (0..n)
        .filter(|&ai| !positive[ai] && best_iou[ai] <= ANCHOR_NEG_IOU)
        .collect();
    // 1:3 positive:negative keeps objectness calibrated on background
    let max_pos = (max_total / 4).max(1);
    if pos.len() > max_pos {
        pos.shuffle(rng);
        pos.truncate(max_pos);
        pos.sort_unstable();
    }
    let max_neg = max_total.saturating_sub(pos.len()).max(1);
    if neg.len() > max_neg {
        neg.shuffle(rng);
        neg.truncate(max_neg);
        neg.sort_unstable();
    }
    let box_deltas = pos
        .iter()
        .map(|&ai| encode_deltas(&anchors.rects[ai], &gt_boxes[best_gt[ai]]))
        .collect();
    AnchorTargets {
        positives: pos,
        negatives: neg,
        box_deltas,
    }
}

/// Regions fed to the mask head for one image, with supervision targets.
#[derive(Debug, Clone)]
pub struct RegionTargets {
    /// Region boxes in feature-grid units.
    pub regions: Vec<RectF>,
    /// 1.0 for matched (foreground) regions, 0.0 for background regions.
    pub labels: Vec<f64>,
    /// Objectness logit of the originating proposal (0 for injected GT boxes).
    pub base_logits: Vec<f64>,
    /// Box delta targets for positive regions.
    pub box_deltas: Vec<Option<[f64; 4]>>,
    /// 28x28 mask targets for positive regions.
    pub mask_targets: Vec<Option<Array2<f32>>>,
}

impl RegionTargets {
    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] > 0.5)
            .collect()
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Builds mask-head training regions from proposals plus the ground-truth
/// boxes themselves: a proposal is positive when its pixel-space IoU with
/// some ground truth reaches 0.5. Up to `max_regions` regions survive, all
/// positives first (ground-truth injections never dropped), then sampled
/// negatives up to a 1:1 ratio.
pub fn build_region_targets(
    proposals: &[RegionProposal],
    annotations: &[InstanceAnnotation],
    downsample: usize,
    max_regions: usize,
    rng: &mut ChaCha8Rng,
) -> RegionTargets {
    let ds = downsample as f64;
    let gt_rects: Vec<RectF> = annotations.iter().map(|a| a.bbox.to_rect()).collect();

    struct Cand {
        rect_feat: RectF,
        base_logit: f64,
        matched: Option<usize>,
        injected_gt: bool,
    }
    let mut cands: Vec<Cand> = Vec::new();
    for p in proposals {
        let pixel_rect = p.bbox.scaled(ds);
        let mut best = (None, 0.0f64);
        for (gi, gt) in gt_rects.iter().enumerate() {
            let iou = pixel_rect.iou(gt);
            if iou > best.1 {
                best = (Some(gi), iou);
            }
        }
        let matched = if best.1 >= REGION_POS_IOU { best.0 } else { None };
        cands.push(Cand {
            rect_feat: p.bbox,
            base_logit: logit(p.objectness),
            matched,
            injected_gt: false,
        });
    }
    for (gi, gt) in gt_rects.iter().enumerate() {
        cands.push(Cand {
            rect_feat: gt.scaled(1.0 / ds),
            base_logit: 0.0,
            matched: Some(gi),
            injected_gt: true,
        });
    }

    let mut pos_idx: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].matched.is_some()).collect();
    let mut neg_idx: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].matched.is_none()).collect();
    // keep injected ground truths, sample the rest
    let injected: Vec<usize> = pos_idx.iter().copied().filter(|&i| cands[i].injected_gt).collect();
    let mut sampled_pos: Vec<usize> = pos_idx
        .iter()
        .copied()
        .filter(|&i| !cands[i].injected_gt)
        .collect();
    let pos_budget = max_regions.saturating_sub(injected.len());
    if sampled_pos.len() > pos_budget {
        sampled_pos.shuffle(rng);
        sampled_pos.truncate(pos_budget);
        sampled_pos.sort_unstable();
    }
    pos_idx = injected;
    pos_idx.extend(sampled_pos);
    pos_idx.sort_unstable();

    let neg_budget = max_regions
        .saturating_sub(pos_idx.len())
        .min((3 * pos_idx.len()).max(2));
    if neg_idx.len() > neg_budget {
        neg_idx.shuffle(rng);
        neg_idx.truncate(neg_budget);
        neg_idx.sort_unstable();
    }

    let mut out = RegionTargets {
        regions: Vec::new(),
        labels: Vec::new(),
        base_logits: Vec::new(),
        box_deltas: Vec::new(),
        mask_targets: Vec::new(),
    };
    for &i in pos_idx.iter().chain(neg_idx.iter()) {
        let c = &cands[i];
        out.regions.push(c.rect_feat);
        out.base_logits.push(c.base_logit);
        match c.matched {
            Some(gi) => {
                out.labels.push(1.0);
                let gt_feat = gt_rects[gi].scaled(1.0 / ds);
                out.box_deltas.push(Some(encode_deltas(&c.rect_feat, &gt_feat)));
                let region_pixel = c.rect_feat.scaled(ds);
                out.mask_targets.push(Some(rasterize_to_grid(
                    &annotations[gi].mask.view(),
                    &region_pixel,
                    MASK_GRID,
                )));
            }
            None => {
                out.labels.push(0.0);
                out.box_deltas.push(None);
                out.mask_targets.push(None);
            }
        }
    }
    out
}
