//! Anchor grid and proposal decoding.

use ndarray::ArrayView4;

use crate::core::geometry::{decode_deltas, nms, RectF};
use crate::core::types::RegionProposal;
use crate::model::net::{ANCHORS_PER_CELL, ANCHOR_ASPECTS, ANCHOR_SCALES};
use crate::scalar::Scalar;

pub const PROPOSAL_NMS_IOU: f64 = 0.7;
const PRE_NMS_TOP: usize = 300;

/// Anchors over a feature grid, in feature-grid units. Flat index layout is
/// `a * h * w + y * w + x`, matching a flattened `[A,h,w]` map.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub rects: Vec<RectF>,
    pub anchors_per_cell: usize,
    pub h: usize,
    pub w: usize,
}

impl AnchorSet {
    pub fn build(h: usize, w: usize) -> Self {
        let mut rects = Vec::with_capacity(ANCHORS_PER_CELL * h * w);
        for scale in ANCHOR_SCALES {
            for aspect in ANCHOR_ASPECTS {
                let aw = scale * aspect.sqrt();
                let ah = scale / aspect.sqrt();
                for y in 0..h {
                    for x in 0..w {
                        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                        rects.push(RectF::new(
                            cx - 0.5 * aw,
                            cy - 0.5 * ah,
                            cx + 0.5 * aw,
                            cy + 0.5 * ah,
                        ));
                    }
                }
            }
        }
        AnchorSet {
            rects,
            anchors_per_cell: ANCHORS_PER_CELL,
            h,
            w,
        }
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    /// Flat index of anchor `a` at cell `(y, x)`.
    pub fn flat(&self, a: usize, y: usize, x: usize) -> usize {
        a * self.h * self.w + y * self.w + x
    }
}

/// Decodes RPN outputs for one image of a batch into scored proposals:
/// sigmoid objectness, delta decoding against the anchors, clipping to the
/// feature grid, NMS at [`PROPOSAL_NMS_IOU`], and a `max_n` cap. Ties in
/// score order break toward the lower anchor index, so the result is a
/// deterministic function of the inputs.
pub fn decode_proposals<F: Scalar>(
    obj_logits: &ArrayView4<'_, F>,
    deltas: &ArrayView4<'_, F>,
    anchors: &AnchorSet,
    image: usize,
    max_n: usize,
) -> Vec<RegionProposal> {
    let (_, a_ch, h, w) = obj_logits.dim();
    assert_eq!(a_ch, anchors.anchors_per_cell);
    assert_eq!((h, w), (anchors.h, anchors.w));
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(a_ch * h * w);
    for a in 0..a_ch {
        for y in 0..h {
            for x in 0..w {
                let logit = obj_logits[(image, a, y, x)].to_float();
                let score = 1.0 / (1.0 + (-logit).exp());
                scored.push((anchors.flat(a, y, x), score));
            }
        }
    }
    scored.sort_by(|l, r| {
        r.1.partial_cmp(&l.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(l.0.cmp(&r.0))
    });
    scored.truncate(PRE_NMS_TOP);

    let mut rects = Vec::with_capacity(scored.len());
    let mut scores = Vec::with_capacity(scored.len());
    for &(flat, score) in &scored {
        let a = flat / (h * w);
        let rest = flat % (h * w);
        let (y, x) = (rest / w, rest % w);
        let d = [
            deltas[(image, 4 * a, y, x)].to_float(),
            deltas[(image, 4 * a + 1, y, x)].to_float(),
            deltas[(image, 4 * a + 2, y, x)].to_float(),
            deltas[(image, 4 * a + 3, y, x)].to_float(),
        ];
        let decoded = decode_deltas(&anchors.rects[flat], d).clipped(w as f64, h as f64);
        rects.push(decoded);
        scores.push(score);
    }
    let keep = nms(&rects, &scores, PROPOSAL_NMS_IOU);
    keep.into_iter()
        .take(max_n)
        .map(|i| RegionProposal {
            bbox: rects[i],
            objectness: scores[i],
        })
        .collect()
}
