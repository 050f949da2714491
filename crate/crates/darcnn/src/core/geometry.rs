//! Boxes, IoU, tight bounding boxes, NMS, and box-delta coding.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive integer pixel box `(x0, y0, x1, y1)`: a single pixel at
/// row `y`, column `x` has `x0 == x1 == x` and `y0 == y1 == y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0 + 1
    }

    /// Continuous rectangle covering the pixel area: `[x0, x1+1) x [y0, y1+1)`.
    pub fn to_rect(&self) -> RectF {
        RectF {
            x0: self.x0 as f64,
            y0: self.y0 as f64,
            x1: (self.x1 + 1) as f64,
            y1: (self.y1 + 1) as f64,
        }
    }
}

/// Continuous axis-aligned rectangle with `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectF {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RectF {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        RectF { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        (self.width()).max(0.0) * (self.height()).max(0.0)
    }

    pub fn cx(&self) -> f64 {
        0.5 * (self.x0 + self.x1)
    }

    pub fn cy(&self) -> f64 {
        0.5 * (self.y0 + self.y1)
    }

    pub fn scaled(&self, s: f64) -> RectF {
        RectF::new(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)
    }

    /// Clip to `[0,w] x [0,h]`, enforcing a minimal positive extent so the
    /// result stays usable for pooling.
    pub fn clipped(&self, w: f64, h: f64) -> RectF {
        let min_ext = 1e-3;
        let x0 = self.x0.clamp(0.0, w - min_ext);
        let y0 = self.y0.clamp(0.0, h - min_ext);
        let x1 = self.x1.clamp(x0 + min_ext, w);
        let y1 = self.y1.clamp(y0 + min_ext, h);
        RectF { x0, y0, x1, y1 }
    }

    pub fn iou(&self, other: &RectF) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Smallest pixel box containing every foreground pixel of `mask[(y, x)]`.
pub fn tight_box(mask: &ArrayView2<'_, bool>) -> Result<PixelBox> {
    let mut bounds: Option<(u32, u32, u32, u32)> = None;
    for ((y, x), &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        let (x_u, y_u) = (x as u32, y as u32);
        bounds = Some(match bounds {
            None => (x_u, y_u, x_u, y_u),
            Some((x0, y0, x1, y1)) => (x0.min(x_u), y0.min(y_u), x1.max(x_u), y1.max(y_u)),
        });
    }
    let (x0, y0, x1, y1) =
        bounds.ok_or_else(|| Error::EmptyMask("tight_box requires a foreground pixel".into()))?;
    Ok(PixelBox { x0, y0, x1, y1 })
}

/// Greedy non-maximum suppression. Returns indices of kept boxes in
/// descending score order; score ties break toward the lower index.
pub fn nms(rects: &[RectF], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(rects.len(), scores.len());
    let mut order: Vec<usize> = (0..rects.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = Vec::new();
    let mut suppressed = vec![false; rects.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && rects[i].iou(&rects[j]) >= iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Box regression targets `(tx, ty, tw, th)` taking `anchor` onto `gt`.
pub fn encode_deltas(anchor: &RectF, gt: &RectF) -> [f64; 4] {
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gt.cx() - anchor.cx()) / aw,
        (gt.cy() - anchor.cy()) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Apply predicted deltas to an anchor. Scale deltas are clamped so an
/// untrained head cannot explode the box.
pub fn decode_deltas(anchor: &RectF, d: [f64; 4]) -> RectF {
    let clamp = 4.0;
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = anchor.cx() + d[0].clamp(-clamp, clamp) * aw;
    let cy = anchor.cy() + d[1].clamp(-clamp, clamp) * ah;
    let w = aw * d[2].clamp(-clamp, clamp).exp();
    let h = ah * d[3].clamp(-clamp, clamp).exp();
    RectF::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}
