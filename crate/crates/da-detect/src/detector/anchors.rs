//! Anchor grid generation.

use super::boxes::BoundingBox;
use serde::{Deserialize, Serialize};

/// Anchor shapes and the per-image training sample budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Square-root areas in pixels; each anchor has area `size²`.
    pub sizes: Vec<f64>,
    /// Height/width ratios.
    pub ratios: Vec<f64>,
    /// Anchors sampled per image for the RPN objectness/regression loss.
    pub per_image_samples: usize,
}

impl AnchorSpec {
    /// Full-resolution protocol: sizes (32, 64, 128, 256, 512), ratios
    /// (1, 2, 3), 256 sampled anchors per image.
    pub fn paper() -> Self {
        Self {
            sizes: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            ratios: vec![1.0, 2.0, 3.0],
            per_image_samples: 256,
        }
    }

    /// Desk-scale synthetic-image default, same ratio set.
    pub fn desk() -> Self {
        Self {
            sizes: vec![8.0, 16.0, 32.0, 64.0, 128.0],
            ratios: vec![1.0, 2.0, 3.0],
            per_image_samples: 256,
        }
    }

    pub fn shapes_per_location(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }
}

/// One anchor per (location, size, ratio), centered on the feature cell.
/// An anchor of size `s` and ratio `r` has area `s²` and height/width `r`.
/// Anchors are not clipped; proposals are clipped after decoding.
pub fn generate_anchors(
    spec: &AnchorSpec,
    feature_shape: (usize, usize),
    stride: usize,
) -> Vec<BoundingBox> {
    assert!(stride > 0, "stride must be positive");
    assert!(!spec.sizes.is_empty() && !spec.ratios.is_empty());
    let (hf, wf) = feature_shape;
    let mut anchors = Vec::with_capacity(hf * wf * spec.shapes_per_location());
    for y in 0..hf {
        for x in 0..wf {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            for &size in &spec.sizes {
                for &ratio in &spec.ratios {
                    let w = size / ratio.sqrt();
                    let h = size * ratio.sqrt();
                    anchors.push(BoundingBox {
                        x1: cx - 0.5 * w,
                        y1: cy - 0.5 * h,
                        x2: cx + 0.5 * w,
                        y2: cy + 0.5 * h,
                        label: 0,
                        score: None,
                    });
                }
            }
        }
    }
    anchors
}
