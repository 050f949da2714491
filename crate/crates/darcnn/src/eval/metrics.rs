//! Instance segmentation metrics over binary masks on a common grid.

use ndarray::Array2;

use crate::error::{Error, Result};

fn check_shapes(gt: &[Array2<bool>], pred: &[Array2<bool>]) -> Result<()> {
    let mut dims = gt.iter().chain(pred.iter()).map(|m| m.dim());
    if let Some(first) = dims.next() {
        for d in dims {
            if d != first {
                return Err(Error::Shape(format!("mask grids differ: {first:?} vs {d:?}")));
            }
        }
    }
    Ok(())
}

fn count(m: &Array2<bool>) -> usize {
    m.iter().filter(|&&v| v).count()
}

fn intersection(a: &Array2<bool>, b: &Array2<bool>) -> usize {
    a.iter().zip(b.iter()).filter(|(&x, &y)| x && y).count()
}

/// IoU of two binary masks; 0 when both are empty.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let inter = intersection(a, b);
    let union = count(a) + count(b) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy best-first one-to-one matching over all (gt, pred) pairs with
/// positive IoU, in descending IoU order; ties break toward the lower
/// prediction index, then the lower ground-truth index.
fn best_first_matching(gt: &[Array2<bool>], pred: &[Array2<bool>]) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            let iou = mask_iou(g, p);
            if iou > 0.0 {
                pairs.push((gi, pi, iou));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.0.cmp(&b.0))
    });
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut matches = Vec::new();
    for (gi, pi, iou) in pairs {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            matches.push((gi, pi, iou));
        }
    }
    matches
}

/// Aggregated Jaccard Index: greedily match ground truths and predictions
/// (best-first by IoU), accumulate the matched intersections into the
/// numerator and the matched unions into the denominator, then add the
/// pixels of unmatched ground truths and unused predictions to the
/// denominator. Defined as 1 when both sides are empty and 0 when exactly
/// one side is.
pub fn aji(gt: &[Array2<bool>], pred: &[Array2<bool>]) -> Result<f64> {
    let (c, u) = aji_counts(gt, pred)?;
    if u == 0 {
        return Ok(1.0);
    }
    Ok(c as f64 / u as f64)
}

/// Aggregated intersection and union cardinalities backing [`aji`]; exposed
/// so a dataset-pooled aggregate can sum them across images.
pub fn aji_counts(gt: &[Array2<bool>], pred: &[Array2<bool>]) -> Result<(usize, usize)> {
    check_shapes(gt, pred)?;
    let matches = best_first_matching(gt, pred);
    let mut c = 0usize;
    let mut u = 0usize;
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    for &(gi, pi, _) in &matches {
        let inter = intersection(&gt[gi], &pred[pi]);
        let union = count(&gt[gi]) + count(&pred[pi]) - inter;
        c += inter;
        u += union;
        gt_used[gi] = true;
        pred_used[pi] = true;
    }
    for (gi, g) in gt.iter().enumerate() {
        if !gt_used[gi] {
            u += count(g);
        }
    }
    for (pi, p) in pred.iter().enumerate() {
        if !pred_used[pi] {
            u += count(p);
        }
    }
    Ok((c, u))
}

/// F1 over foreground pixels; 1 when both masks are empty.
pub fn pixel_f1(gt_union: &Array2<bool>, pred_union: &Array2<bool>) -> Result<f64> {
    let (tp, fp, fne) = pixel_counts(gt_union, pred_union)?;
    Ok(f1_from_counts(tp, fp, fne))
}

/// (TP, FP, FN) pixel counts backing [`pixel_f1`].
pub fn pixel_counts(
    gt_union: &Array2<bool>,
    pred_union: &Array2<bool>,
) -> Result<(usize, usize, usize)> {
    if gt_union.dim() != pred_union.dim() {
        return Err(Error::Shape(format!(
            "mask grids differ: {:?} vs {:?}",
            gt_union.dim(),
            pred_union.dim()
        )));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fne = 0;
    for (&g, &p) in gt_union.iter().zip(pred_union.iter()) {
        match (g, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fne += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fne))
}

pub fn f1_from_counts(tp: usize, fp: usize, fne: usize) -> f64 {
    if tp + fp + fne == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fne) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Object-level F1: one-to-one greedy matching by descending IoU; matched
/// pairs with IoU >= threshold are true positives. 1 when both sides are
/// empty.
pub fn object_f1(
    gt: &[Array2<bool>],
    pred: &[Array2<bool>],
    iou_threshold: f64,
) -> Result<f64> {
    let (tp, n_gt, n_pred) = object_counts(gt, pred, iou_threshold)?;
    if n_gt == 0 && n_pred == 0 {
        return Ok(1.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / n_pred as f64;
    let recall = tp as f64 / n_gt as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// (TP, |gt|, |pred|) counts backing [`object_f1`].
pub fn object_counts(
    gt: &[Array2<bool>],
    pred: &[Array2<bool>],
    iou_threshold: f64,
) -> Result<(usize, usize, usize)> {
    if !(0.0..1.0).contains(&iou_threshold) || iou_threshold == 0.0 {
        return Err(Error::Config(vec![
            "object_f1 iou_threshold must be in (0,1)".into(),
        ]));
    }
    check_shapes(gt, pred)?;
    let tp = best_first_matching(gt, pred)
        .iter()
        .filter(|&&(_, _, iou)| iou >= iou_threshold)
        .count();
    Ok((tp, gt.len(), pred.len()))
}

/// Maximum IoU between the single ground-truth instance and any prediction;
/// 0 with no predictions. Defined only in the single-object regime.
pub fn max_iou(gt: &[Array2<bool>], pred: &[Array2<bool>]) -> Result<f64> {
    if gt.len() != 1 {
        return Err(Error::Mode(format!(
            "max_iou needs exactly one ground-truth instance, got {}; use aji",
            gt.len()
        )));
    }
    check_shapes(gt, pred)?;
    Ok(pred
        .iter()
        .map(|p| mask_iou(&gt[0], p))
        .fold(0.0, f64::max))
}
