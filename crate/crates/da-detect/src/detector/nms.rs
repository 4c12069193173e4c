//! Greedy non-maximum suppression.

use super::boxes::{iou, BoundingBox};

/// Greedy descending-score suppression: a box is dropped when it overlaps an
/// already-kept box with IoU strictly above `iou_threshold`. Ties on equal
/// scores are broken by lower box index. Returns kept indices in keep order.
pub fn nms(boxes: &[BoundingBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = boxes[a].score.unwrap_or(0.0);
        let sb = boxes[b].score.unwrap_or(0.0);
        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
    });

    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
