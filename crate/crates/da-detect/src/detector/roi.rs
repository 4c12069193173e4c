//! ROI heads: bilinear ROI pooling into a shared FC, then classification and
//! class-agnostic box refinement. The shared FC output is the per-proposal
//! instance feature exposed to the instance-level domain head.

use super::boxes::{decode_delta, encode_delta, iou, BoundingBox};
use super::nms::nms;
use crate::ops::{self, Roi};
use crate::params::{he_normal, join, zeros, Params};
use crate::tape::{Tape, Value};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Final scored, class-labeled detections after confidence filtering and
/// class-wise NMS.
#[derive(Clone, Debug, Default)]
pub struct DetectionSet {
    pub detections: Vec<BoundingBox>,
}

pub struct RoiHead {
    fc_w: ArrayD<f64>,
    fc_b: ArrayD<f64>,
    cls_w: ArrayD<f64>,
    cls_b: ArrayD<f64>,
    reg_w: ArrayD<f64>,
    reg_b: ArrayD<f64>,
    pub pool: usize,
    pub channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

pub struct RoiBind {
    fc_w: Value,
    fc_b: Value,
    cls_w: Value,
    cls_b: Value,
    reg_w: Value,
    reg_b: Value,
}

/// Tape handles of one ROI forward pass.
pub struct RoiForward {
    /// Shared FC activation per proposal, `[R, hidden]` — the instance
    /// features fed to the instance-level domain head.
    pub instance_features: Value,
    /// Class logits `[R, num_classes + 1]` (background first).
    pub cls_logits: Value,
    /// Class-agnostic box deltas `[R, 4]`.
    pub box_deltas: Value,
}

impl RoiHead {
    pub fn new(
        channels: usize,
        pool: usize,
        hidden: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d_pool = channels * pool * pool;
        Self {
            fc_w: he_normal(&[hidden, d_pool], d_pool, rng),
            fc_b: zeros(&[hidden]),
            cls_w: he_normal(&[num_classes + 1, hidden], hidden, rng),
            cls_b: zeros(&[num_classes + 1]),
            reg_w: he_normal(&[4, hidden], hidden, rng),
            reg_b: zeros(&[4]),
            pool,
            channels,
            hidden,
            num_classes,
        }
    }

    pub fn bind(&self, t: &mut Tape) -> RoiBind {
        RoiBind {
            fc_w: t.leaf(self.fc_w.clone()),
            fc_b: t.leaf(self.fc_b.clone()),
            cls_w: t.leaf(self.cls_w.clone()),
            cls_b: t.leaf(self.cls_b.clone()),
            reg_w: t.leaf(self.reg_w.clone()),
            reg_b: t.leaf(self.reg_b.clone()),
        }
    }

    /// Pool `rois` from batched features `[N, C, h, w]` and run the heads.
    /// `spatial_scale` is 1/backbone-stride.
    pub fn forward_on(
        &self,
        t: &mut Tape,
        bind: &RoiBind,
        features: Value,
        rois: Vec<Roi>,
        spatial_scale: f64,
    ) -> RoiForward {
        let r = rois.len();
        let pooled = ops::roi_align(t, features, rois, self.pool, spatial_scale);
        let flat = ops::reshape(t, pooled, &[r, self.channels * self.pool * self.pool]);
        let hidden = ops::dense(t, flat, bind.fc_w, bind.fc_b);
        let hidden = ops::relu(t, hidden);
        let cls_logits = ops::dense(t, hidden, bind.cls_w, bind.cls_b);
        let box_deltas = ops::dense(t, hidden, bind.reg_w, bind.reg_b);
        RoiForward {
            instance_features: hidden,
            cls_logits,
            box_deltas,
        }
    }
}

impl Params for RoiHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&join(prefix, "fc_w"), &self.fc_w);
        f(&join(prefix, "fc_b"), &self.fc_b);
        f(&join(prefix, "cls_w"), &self.cls_w);
        f(&join(prefix, "cls_b"), &self.cls_b);
        f(&join(prefix, "reg_w"), &self.reg_w);
        f(&join(prefix, "reg_b"), &self.reg_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&join(prefix, "fc_w"), &mut self.fc_w);
        f(&join(prefix, "fc_b"), &mut self.fc_b);
        f(&join(prefix, "cls_w"), &mut self.cls_w);
        f(&join(prefix, "cls_b"), &mut self.cls_b);
        f(&join(prefix, "reg_w"), &mut self.reg_w);
        f(&join(prefix, "reg_b"), &mut self.reg_b);
    }
}

/// Training targets for a sampled set of ROIs.
pub struct SampledRois {
    pub boxes: Vec<BoundingBox>,
    /// 0 = background, else 1-based foreground class.
    pub labels: Vec<usize>,
    /// Regression target per foreground ROI (None for background).
    pub reg_targets: Vec<Option<[f64; 4]>>,
    pub num_fg: usize,
}

/// Match proposals (plus the ground-truth boxes themselves) to ground truth
/// and sample a fixed ROI batch with bounded foreground fraction.
pub fn sample_rois(
    proposals: &[BoundingBox],
    gts: &[BoundingBox],
    rois_per_image: usize,
    fg_fraction: f64,
    fg_iou: f64,
    rng: &mut ChaCha8Rng,
) -> SampledRois {
    let mut candidates: Vec<BoundingBox> = proposals.to_vec();
    candidates.extend(gts.iter().map(|g| g.with_score(1.0)));

    let mut fg: Vec<(BoundingBox, usize, [f64; 4])> = Vec::new();
    let mut bg: Vec<BoundingBox> = Vec::new();
    for cand in &candidates {
        let mut best = 0.0;
        let mut best_gt: Option<&BoundingBox> = None;
        for gt in gts {
            let v = iou(cand, gt);
            if v > best {
                best = v;
                best_gt = Some(gt);
            }
        }
        match best_gt {
            Some(gt) if best >= fg_iou => {
                fg.push((*cand, gt.label as usize, encode_delta(gt, cand)));
            }
            _ => bg.push(*cand),
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let nfg = fg
        .len()
        .min(((rois_per_image as f64) * fg_fraction).round() as usize);
    let nbg = bg.len().min(rois_per_image - nfg);
    fg.truncate(nfg);
    bg.truncate(nbg);

    let mut out = SampledRois {
        boxes: Vec::with_capacity(nfg + nbg),
        labels: Vec::with_capacity(nfg + nbg),
        reg_targets: Vec::with_capacity(nfg + nbg),
        num_fg: nfg,
    };
    for (b, label, delta) in fg {
        out.boxes.push(b);
        out.labels.push(label);
        out.reg_targets.push(Some(delta));
    }
    for b in bg {
        out.boxes.push(b);
        out.labels.push(0);
        out.reg_targets.push(None);
    }
    out
}

/// Apply confidence filtering (`score ≥ confidence`), box refinement, and
/// class-wise NMS to raw head outputs. `cls_probs` rows are softmax
/// distributions with background at index 0.
pub fn postprocess_detections(
    proposal_boxes: &[BoundingBox],
    cls_probs: &ndarray::Array2<f64>,
    box_deltas: &ndarray::Array2<f64>,
    img_w: f64,
    img_h: f64,
    confidence: f64,
    nms_iou: f64,
) -> DetectionSet {
    let num_classes = cls_probs.ncols() - 1;
    let mut dets: Vec<BoundingBox> = Vec::new();
    for class in 1..=num_classes {
        let mut class_dets: Vec<BoundingBox> = Vec::new();
        for (r, prop) in proposal_boxes.iter().enumerate() {
            let score = cls_probs[[r, class]];
            if score < confidence {
                continue;
            }
            let delta = [
                box_deltas[[r, 0]],
                box_deltas[[r, 1]],
                box_deltas[[r, 2]],
                box_deltas[[r, 3]],
            ];
            let (x1, y1, x2, y2) = decode_delta(delta, prop);
            let b = BoundingBox {
                x1,
                y1,
                x2,
                y2,
                label: class as u32,
                score: Some(score),
            }
            .clipped(img_w, img_h);
            if b.width() > 0.0 && b.height() > 0.0 {
                class_dets.push(b);
            }
        }
        for k in nms(&class_dets, nms_iou) {
            dets.push(class_dets[k]);
        }
    }
    dets.sort_by(|a, b| b.score.unwrap().partial_cmp(&a.score.unwrap()).unwrap());
    DetectionSet { detections: dets }
}
