//! Rule-based mask filtering: keep predictions whose mean pixel intensity
//! inside the binarized mask falls below a threshold, over a set of
//! thresholds.

use ndarray::Array3;

use crate::core::maskops::paste_mask;
use crate::core::types::InstancePrediction;

/// Predictions surviving one threshold, as indices into the input list.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleFilterFamily {
    pub threshold: f64,
    pub kept: Vec<usize>,
}

/// For each threshold, the subset of predictions whose mean image intensity
/// inside the binarized (0.5) mask is strictly below it. Thresholds are on
/// the image's raw [0,255] scale. Predictions whose binarized mask is empty
/// have no intensity and are never kept.
pub fn rule_filter(
    predictions: &[InstancePrediction],
    image: &Array3<u8>,
    thresholds: &[f64],
) -> Vec<RuleFilterFamily> {
    let (h, w, c) = image.dim();
    let means: Vec<Option<f64>> = predictions
        .iter()
        .map(|p| {
            let mask = paste_mask(&p.mask_probs.view(), &p.bbox, h, w);
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for ((y, x), &m) in mask.indexed_iter() {
                if m {
                    for ch in 0..c {
                        sum += image[(y, x, ch)] as f64;
                    }
                    n += c;
                }
            }
            (n > 0).then(|| sum / n as f64)
        })
        .collect();
    thresholds
        .iter()
        .map(|&t| RuleFilterFamily {
            threshold: t,
            kept: means
                .iter()
                .enumerate()
                .filter(|(_, m)| matches!(m, Some(v) if *v < t))
                .map(|(i, _)| i)
                .collect(),
        })
        .collect()
}
