use kneexr_core::metrics::iou;
use kneexr_core::BoundingBox;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub center: (f64, f64),
    pub width: f64,
    pub height: f64,
}

impl Anchor {
    pub fn to_box(&self) -> BoundingBox {
        let (cx, cy) = self.center;
        BoundingBox::new(cx - self.width / 2.0, cy - self.height / 2.0, cx + self.width / 2.0, cy + self.height / 2.0)
    }

    /// Regression target `(dx, dy, dw, dh)` taking this anchor onto `b`.
    pub fn encode(&self, b: &BoundingBox) -> [f64; 4] {
        let (bx, by) = b.center();
        [
            (bx - self.center.0) / self.width,
            (by - self.center.1) / self.height,
            (b.width().max(1e-6) / self.width).ln(),
            (b.height().max(1e-6) / self.height).ln(),
        ]
    }

    pub fn decode(&self, d: [f64; 4]) -> BoundingBox {
        let cx = self.center.0 + d[0] * self.width;
        let cy = self.center.1 + d[1] * self.height;
        let w = self.width * d[2].clamp(-4.0, 4.0).exp();
        let h = self.height * d[3].clamp(-4.0, 4.0).exp();
        BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }
}

/// Anchors ordered by grid row, grid column, scale, ratio. `input_size` is
/// `(height, width)`; ratios are height over width.
pub fn anchor_grid(input_size: (usize, usize), stride: usize, scales: &[f64], ratios: &[f64]) -> Vec<Anchor> {
    let (h, w) = input_size;
    assert!(stride > 0 && h % stride == 0 && w % stride == 0, "stride must divide the input size");
    let mut out = Vec::with_capacity((h / stride) * (w / stride) * scales.len() * ratios.len());
    for gy in 0..h / stride {
        for gx in 0..w / stride {
            let center = ((gx as f64 + 0.5) * stride as f64, (gy as f64 + 0.5) * stride as f64);
            for &s in scales {
                for &r in ratios {
                    let width = s / r.sqrt();
                    out.push(Anchor { center, width, height: width * r });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

pub fn match_anchors(anchors: &[Anchor], gts: &[BoundingBox], pos_iou: f64, neg_iou: f64) -> Vec<AnchorLabel> {
    assert!((0.0..=pos_iou).contains(&neg_iou) && pos_iou <= 1.0, "need 0 <= neg_iou <= pos_iou <= 1");
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let boxes: Vec<BoundingBox> = anchors.iter().map(Anchor::to_box).collect();
    let mut best_for_gt = vec![(f64::NEG_INFINITY, usize::MAX); gts.len()];
    let mut labels = Vec::with_capacity(anchors.len());
    for (ai, a) in boxes.iter().enumerate() {
        let mut best = (0.0, 0usize);
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best.0 {
                best = (v, gi);
            }
            if v > best_for_gt[gi].0 {
                best_for_gt[gi] = (v, ai);
            }
        }
        labels.push(if best.0 >= pos_iou {
            AnchorLabel::Positive(best.1)
        } else if best.0 < neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        });
    }
    for (gi, &(v, ai)) in best_for_gt.iter().enumerate() {
        if ai != usize::MAX && v > 0.0 {
            labels[ai] = AnchorLabel::Positive(gi);
        }
    }
    labels
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep the earlier candidate.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) < iou_threshold) {
            keep.push(i);
        }
    }
    keep
}
