//! Region proposal network: objectness + box-delta heads over the backbone
//! feature map, proposal decoding, and anchor target sampling for training.

use super::anchors::AnchorSpec;
use super::boxes::{decode_delta, encode_delta, iou, BoundingBox};
use super::nms::nms;
use crate::ops;
use crate::params::{he_normal, join, zeros, Params};
use crate::tape::{Tape, Value};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scored region proposals for one image. `roi_features` is filled by the
/// ROI heads once the proposals have been pooled.
#[derive(Clone, Debug, Default)]
pub struct ProposalSet {
    pub boxes: Vec<BoundingBox>,
    pub objectness: Vec<f64>,
    pub roi_features: Option<ndarray::Array2<f64>>,
}

pub struct RpnHead {
    conv_w: ArrayD<f64>,
    conv_b: ArrayD<f64>,
    obj_w: ArrayD<f64>,
    obj_b: ArrayD<f64>,
    reg_w: ArrayD<f64>,
    reg_b: ArrayD<f64>,
    pub anchors_per_loc: usize,
}

/// Tape handles for one bound RPN head.
pub struct RpnBind {
    conv_w: Value,
    conv_b: Value,
    obj_w: Value,
    obj_b: Value,
    reg_w: Value,
    reg_b: Value,
}

/// RPN raw outputs: objectness logits `[N, H·W·A]` and box deltas
/// `[N, H·W·A, 4]`, ordered location-major to match anchor enumeration.
pub struct RpnOutputs {
    pub obj_logits: Value,
    pub deltas: Value,
}

impl RpnHead {
    pub fn new(channels: usize, anchors_per_loc: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv_w: he_normal(&[channels, channels, 3, 3], channels * 9, rng),
            conv_b: zeros(&[channels]),
            obj_w: he_normal(&[anchors_per_loc, channels, 1, 1], channels, rng),
            obj_b: zeros(&[anchors_per_loc]),
            reg_w: he_normal(&[4 * anchors_per_loc, channels, 1, 1], channels, rng),
            reg_b: zeros(&[4 * anchors_per_loc]),
            anchors_per_loc,
        }
    }

    pub fn bind(&self, t: &mut Tape) -> RpnBind {
        RpnBind {
            conv_w: t.leaf(self.conv_w.clone()),
            conv_b: t.leaf(self.conv_b.clone()),
            obj_w: t.leaf(self.obj_w.clone()),
            obj_b: t.leaf(self.obj_b.clone()),
            reg_w: t.leaf(self.reg_w.clone()),
            reg_b: t.leaf(self.reg_b.clone()),
        }
    }

    pub fn forward_on(&self, t: &mut Tape, bind: &RpnBind, features: Value) -> RpnOutputs {
        let fs = t.value(features).shape().to_vec();
        let (n, hf, wf) = (fs[0], fs[2], fs[3]);
        let a = self.anchors_per_loc;
        let h = ops::conv2d(t, features, bind.conv_w, bind.conv_b, 1, 1);
        let h = ops::relu(t, h);
        let obj = ops::conv2d(t, h, bind.obj_w, bind.obj_b, 1, 0);
        let obj = ops::permute(t, obj, &[0, 2, 3, 1]);
        let obj_logits = ops::reshape(t, obj, &[n, hf * wf * a]);
        let reg = ops::conv2d(t, h, bind.reg_w, bind.reg_b, 1, 0);
        let reg = ops::permute(t, reg, &[0, 2, 3, 1]);
        let deltas = ops::reshape(t, reg, &[n, hf * wf * a, 4]);
        RpnOutputs { obj_logits, deltas }
    }
}

impl Params for RpnHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&join(prefix, "conv_w"), &self.conv_w);
        f(&join(prefix, "conv_b"), &self.conv_b);
        f(&join(prefix, "obj_w"), &self.obj_w);
        f(&join(prefix, "obj_b"), &self.obj_b);
        f(&join(prefix, "reg_w"), &self.reg_w);
        f(&join(prefix, "reg_b"), &self.reg_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&join(prefix, "conv_w"), &mut self.conv_w);
        f(&join(prefix, "conv_b"), &mut self.conv_b);
        f(&join(prefix, "obj_w"), &mut self.obj_w);
        f(&join(prefix, "obj_b"), &mut self.obj_b);
        f(&join(prefix, "reg_w"), &mut self.reg_w);
        f(&join(prefix, "reg_b"), &mut self.reg_b);
    }
}

/// Proposal decoding knobs.
#[derive(Clone, Debug)]
pub struct ProposalConfig {
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub nms_iou: f64,
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            pre_nms_top: 300,
            post_nms_top: 32,
            nms_iou: 0.7,
            min_size: 1.0,
        }
    }
}

/// Decode, clip, rank and suppress anchor predictions into proposals.
/// Ranking ties (equal objectness) fall back to ascending anchor index.
pub fn generate_proposals(
    anchors: &[BoundingBox],
    obj_scores: &[f64],
    deltas: &[[f64; 4]],
    img_w: f64,
    img_h: f64,
    cfg: &ProposalConfig,
) -> ProposalSet {
    assert_eq!(anchors.len(), obj_scores.len());
    assert_eq!(anchors.len(), deltas.len());

    let mut candidates: Vec<(usize, BoundingBox)> = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let (x1, y1, x2, y2) = decode_delta(deltas[i], anchor);
        let b = BoundingBox {
            x1,
            y1,
            x2,
            y2,
            label: 0,
            score: Some(obj_scores[i]),
        }
        .clipped(img_w, img_h);
        if b.width() >= cfg.min_size && b.height() >= cfg.min_size {
            candidates.push((i, b));
        }
    }
    candidates.sort_by(|(ia, a), (ib, b)| {
        b.score
            .unwrap()
            .partial_cmp(&a.score.unwrap())
            .unwrap()
            .then(ia.cmp(ib))
    });
    candidates.truncate(cfg.pre_nms_top);

    let boxes: Vec<BoundingBox> = candidates.iter().map(|(_, b)| *b).collect();
    let kept = nms(&boxes, cfg.nms_iou);
    let mut out = ProposalSet::default();
    for &k in kept.iter().take(cfg.post_nms_top) {
        out.boxes.push(boxes[k]);
        out.objectness.push(boxes[k].score.unwrap());
    }
    out
}

/// Sampled anchor targets for the RPN loss.
pub struct AnchorTargets {
    /// Indices into the anchor list, positives first.
    pub sampled: Vec<usize>,
    /// 1.0 for positive (object) anchors, 0.0 for negatives; aligned with `sampled`.
    pub labels: Vec<f64>,
    /// Number of positives at the front of `sampled`.
    pub num_pos: usize,
    /// Regression targets for the positive anchors.
    pub pos_deltas: Vec<[f64; 4]>,
}

/// Match anchors to ground truth and sample a fixed budget for the loss:
/// positives are anchors with IoU ≥ `pos_iou` plus each ground truth's
/// best-overlapping anchor; negatives have max IoU < `neg_iou`. At most half
/// the budget is positive.
pub fn assign_anchor_targets(
    anchors: &[BoundingBox],
    gts: &[BoundingBox],
    spec: &AnchorSpec,
    pos_iou: f64,
    neg_iou: f64,
    rng: &mut ChaCha8Rng,
) -> AnchorTargets {
    let n = anchors.len();
    let mut max_iou = vec![0.0f64; n];
    let mut argmax = vec![usize::MAX; n];
    for (ai, anchor) in anchors.iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > max_iou[ai] {
                max_iou[ai] = v;
                argmax[ai] = gi;
            }
        }
    }

    let mut is_pos = vec![false; n];
    for ai in 0..n {
        if max_iou[ai] >= pos_iou {
            is_pos[ai] = true;
        }
    }
    // each gt claims its best anchor so no object goes unmatched
    for (gi, gt) in gts.iter().enumerate() {
        let mut best = 0.0;
        for anchor in anchors.iter() {
            best = best.max(iou(anchor, gt));
        }
        if best > 0.0 {
            for (ai, anchor) in anchors.iter().enumerate() {
                if (iou(anchor, gt) - best).abs() < 1e-12 {
                    is_pos[ai] = true;
                    if max_iou[ai] < best {
                        max_iou[ai] = best;
                        argmax[ai] = gi;
                    }
                }
            }
        }
    }

    let mut pos: Vec<usize> = (0..n).filter(|&i| is_pos[i]).collect();
    let mut neg: Vec<usize> = (0..n)
        .filter(|&i| !is_pos[i] && max_iou[i] < neg_iou)
        .collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let budget = spec.per_image_samples;
    let npos = pos.len().min(budget / 2);
    let nneg = neg.len().min(budget - npos);
    pos.truncate(npos);
    neg.truncate(nneg);

    let mut sampled = Vec::with_capacity(npos + nneg);
    let mut labels = Vec::with_capacity(npos + nneg);
    let mut pos_deltas = Vec::with_capacity(npos);
    for &ai in &pos {
        sampled.push(ai);
        labels.push(1.0);
        pos_deltas.push(encode_delta(&gts[argmax[ai]], &anchors[ai]));
    }
    for &ai in &neg {
        sampled.push(ai);
        labels.push(0.0);
    }
    AnchorTargets {
        sampled,
        labels,
        num_pos: npos,
        pos_deltas,
    }
}

/// Logistic sigmoid on a detached slice of objectness logits.
pub fn sigmoid_scores(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect()
}

/// Convenience: draw a deterministic subsample of `k` items from `0..n`.
pub fn sample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    idx
}

/// Uniform random pick used by dataset iteration.
pub fn pick(n: usize, rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(0..n)
}
