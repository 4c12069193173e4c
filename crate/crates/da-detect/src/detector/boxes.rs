//! Axis-aligned boxes, IoU, and the anchor delta parameterization.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A detection or ground-truth box in pixel coordinates. `score` is absent
/// on ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub label: u32,
    pub score: Option<f64>,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, label: u32) -> Result<Self> {
        if !(x2 > x1 && y2 > y1) {
            return Err(Error::invalid(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self {
            x1,
            y1,
            x2,
            y2,
            label,
            score: None,
        })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// Clip coordinates to `[0, w] × [0, h]`.
    pub fn clipped(&self, w: f64, h: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
            ..*self
        }
    }
}

/// Intersection-over-union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Encode `target` relative to `anchor` as `(dx, dy, log dw, log dh)`.
pub fn encode_delta(target: &BoundingBox, anchor: &BoundingBox) -> [f64; 4] {
    let (tcx, tcy) = target.center();
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Invert [`encode_delta`]. Width/height deltas are capped to avoid
/// exp overflow from untrained regressors.
pub fn decode_delta(delta: [f64; 4], anchor: &BoundingBox) -> (f64, f64, f64, f64) {
    const MAX_LOG_SCALE: f64 = 4.0;
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + delta[0] * aw;
    let cy = acy + delta[1] * ah;
    let w = aw * delta[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = ah * delta[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    (cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2, 0).unwrap()
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BoundingBox::new(5.0, 0.0, 5.0, 10.0, 0).is_err());
        assert!(BoundingBox::new(0.0, 8.0, 10.0, 3.0, 0).is_err());
    }

    #[test]
    fn iou_disjoint_identical_nested() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &b), 0.0);
        assert_eq!(iou(&a, &a), 1.0);
        let c = bx(0.0, 0.0, 5.0, 10.0);
        assert!((iou(&a, &c) - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            ax in 0.0f64..50.0, ay in 0.0f64..50.0, aw in 1.0f64..30.0, ah in 1.0f64..30.0,
            bx_ in 0.0f64..50.0, by in 0.0f64..50.0, bw in 1.0f64..30.0, bh in 1.0f64..30.0,
        ) {
            let a = bx(ax, ay, ax + aw, ay + ah);
            let b = bx(bx_, by, bx_ + bw, by + bh);
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn delta_roundtrip(
            ax in 0.0f64..50.0, ay in 0.0f64..50.0, aw in 2.0f64..40.0, ah in 2.0f64..40.0,
            tx in 0.0f64..50.0, ty in 0.0f64..50.0, tw in 2.0f64..40.0, th in 2.0f64..40.0,
        ) {
            let anchor = bx(ax, ay, ax + aw, ay + ah);
            let target = bx(tx, ty, tx + tw, ty + th);
            let d = encode_delta(&target, &anchor);
            let (x1, y1, x2, y2) = decode_delta(d, &anchor);
            prop_assert!((x1 - target.x1).abs() < 1e-6);
            prop_assert!((y1 - target.y1).abs() < 1e-6);
            prop_assert!((x2 - target.x2).abs() < 1e-6);
            prop_assert!((y2 - target.y2).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_delta_decodes_to_anchor() {
        let anchor = bx(4.0, 6.0, 20.0, 30.0);
        let (x1, y1, x2, y2) = decode_delta([0.0; 4], &anchor);
        assert!((x1 - 4.0).abs() < 1e-12);
        assert!((y1 - 6.0).abs() < 1e-12);
        assert!((x2 - 20.0).abs() < 1e-12);
        assert!((y2 - 30.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_stays_in_bounds() {
        let b = bx(-5.0, -2.0, 130.0, 90.0).clipped(128.0, 96.0);
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0.0, 0.0, 128.0, 90.0));
    }
}
