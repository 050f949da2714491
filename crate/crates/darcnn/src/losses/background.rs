//! Self-supervised background representation consistency.
//!
//! For each qualifying region the spatial mean of its background feature
//! vectors is pulled toward the per-image mean of those means, with a
//! depth-averaged L1 distance. Regions with empty background sets are
//! excluded rather than contributing zero vectors.

use ndarray::{Array3, ArrayD, IxDyn};

use crate::core::config::PipelineConfig;
use crate::core::types::InstancePrediction;
use crate::model::{background_cells, BackgroundCells};
use crate::scalar::Scalar;
use crate::tensor::{Tape, VarId};

/// One region's background geometry, resolved against a batch image.
#[derive(Debug, Clone)]
pub struct BgRegion {
    pub image: usize,
    pub cells: BackgroundCells,
}

/// Resolves predictions (already filtered to confidence > k upstream) into
/// background cell sets for one image of a batch.
pub fn resolve_bg_regions(
    image: usize,
    predictions: &[InstancePrediction],
    i_background: f64,
    feat_h: usize,
    feat_w: usize,
    downsample: usize,
) -> Vec<BgRegion> {
    predictions
        .iter()
        .filter_map(|p| background_cells(p, i_background, feat_h, feat_w, downsample))
        .map(|cells| BgRegion { image, cells })
        .collect()
}

/// Tape version over a batched `[N,D,h,w]` private feature map. Per image:
/// mean over qualifying regions of `mean_depth |b(r) - mu_b|`; images with
/// fewer than two qualifying regions contribute zero. The batch loss is the
/// mean over images.
pub fn background_consistency_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    h_p_t: VarId,
    regions: &[BgRegion],
) -> VarId {
    let shape = tape.value(h_p_t).shape().to_vec();
    let (n_images, depth) = (shape[0], shape[1]);
    let mut image_losses: Vec<VarId> = Vec::new();
    for image in 0..n_images {
        let mut means: Vec<VarId> = Vec::new();
        for region in regions.iter().filter(|r| r.image == image) {
            let c = &region.cells;
            let count = c.bg.iter().filter(|&&b| b).count();
            if count == 0 {
                continue;
            }
            let window = tape.slice_spatial(h_p_t, image, c.y0, c.y1, c.x0, c.x1);
            let mask = ArrayD::from_shape_fn(
                IxDyn(&[1, 1, c.y1 - c.y0, c.x1 - c.x0]),
                |idx| {
                    if c.bg[(idx[2], idx[3])] {
                        F::one()
                    } else {
                        F::zero()
                    }
                },
            );
            let masked = tape.mul_const(window, mask);
            let summed = tape.sum_spatial(masked);
            means.push(tape.scale(summed, F::from_float(1.0 / count as f64)));
        }
        if means.len() < 2 {
            continue;
        }
        let stacked = tape.add_n(&means);
        let mu = tape.scale(stacked, F::from_float(1.0 / means.len() as f64));
        let mut region_terms: Vec<VarId> = Vec::new();
        for &m in &means {
            let diff = tape.sub(m, mu);
            let a = tape.abs(diff);
            region_terms.push(tape.mean(a));
        }
        let total = tape.add_n(&region_terms);
        image_losses.push(tape.scale(total, F::from_float(1.0 / region_terms.len() as f64)));
    }
    let _ = depth;
    if image_losses.is_empty() {
        return tape.constant(ArrayD::zeros(IxDyn(&[1])));
    }
    let total = tape.add_n(&image_losses);
    tape.scale(total, F::from_float(1.0 / n_images as f64))
}

/// Plain-value loss for one image's private feature map and its qualifying
/// predictions; 0 when fewer than two regions qualify.
pub fn background_consistency_loss<F: Scalar>(
    h_p_t: &Array3<F>,
    predictions: &[InstancePrediction],
    cfg: &PipelineConfig,
) -> F {
    let (d, h, w) = h_p_t.dim();
    let regions = resolve_bg_regions(
        0,
        predictions,
        cfg.pipeline.i_background,
        h,
        w,
        cfg.model.downsample,
    );
    let mut tape = Tape::new();
    let input = tape.constant(
        h_p_t
            .clone()
            .into_shape_with_order((1, d, h, w))
            .unwrap()
            .into_dyn(),
    );
    let out = background_consistency_on_tape(&mut tape, input, &regions);
    tape.scalar(out)
}
