use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bbox::{iou, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorLabel {
    pub anchor: usize,
    pub label: Label,
    /// Ground-truth index a positive anchor regresses towards.
    pub matched: Option<usize>,
}

/// IoU thresholds for the proposal network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelThresholds {
    pub positive: f64,
    pub negative: f64,
}

/// Labels each anchor against the ground truth.
///
/// Positive when its best IoU reaches `positive` or it is the best match of
/// some ground-truth box; negative when its best IoU is at most `negative`;
/// ignored otherwise.
pub fn label_anchors(anchors: &[BoundingBox], ground_truth: &[BoundingBox], thresholds: LabelThresholds) -> Vec<AnchorLabel> {
    if ground_truth.is_empty() {
        return (0..anchors.len())
            .map(|anchor| AnchorLabel {
                anchor,
                label: Label::Negative,
                matched: None,
            })
            .collect();
    }

    let mut best_for_anchor = vec![(0.0f64, 0usize); anchors.len()];
    let mut best_for_gt = vec![0.0f64; ground_truth.len()];
    // Only anchors overlapping a ground-truth box need the full matrix row.
    let mut overlaps: Vec<(usize, usize, f64)> = Vec::new();
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in ground_truth.iter().enumerate() {
            let v = iou(a, g);
            if v > 0.0 {
                overlaps.push((ai, gi, v));
                if v > best_for_anchor[ai].0 {
                    best_for_anchor[ai] = (v, gi);
                }
                if v > best_for_gt[gi] {
                    best_for_gt[gi] = v;
                }
            }
        }
    }

    let mut labels: Vec<AnchorLabel> = best_for_anchor
        .iter()
        .enumerate()
        .map(|(anchor, &(v, gi))| {
            let (label, matched) = if v >= thresholds.positive {
                (Label::Positive, Some(gi))
            } else if v <= thresholds.negative {
                (Label::Negative, None)
            } else {
                (Label::Ignored, None)
            };
            AnchorLabel { anchor, label, matched }
        })
        .collect();

    // Every ground-truth box keeps at least one positive anchor.
    for &(ai, gi, v) in &overlaps {
        if v == best_for_gt[gi] && labels[ai].label != Label::Positive {
            labels[ai].label = Label::Positive;
            labels[ai].matched = Some(gi);
        }
    }
    labels
}

/// Draws a training mini-batch: at most `batch * positive_fraction`
/// positives, the rest negatives. Unsampled anchors become ignored.
pub fn sample_labels<R: Rng>(labels: &[AnchorLabel], batch: usize, positive_fraction: f64, rng: &mut R) -> Vec<AnchorLabel> {
    let mut pos: Vec<usize> = labels.iter().filter(|l| l.label == Label::Positive).map(|l| l.anchor).collect();
    let mut neg: Vec<usize> = labels.iter().filter(|l| l.label == Label::Negative).map(|l| l.anchor).collect();
    let max_pos = ((batch as f64) * positive_fraction).round() as usize;
    pos.shuffle(rng);
    pos.truncate(max_pos);
    let max_neg = batch.saturating_sub(pos.len());
    neg.shuffle(rng);
    neg.truncate(max_neg);

    let mut keep = vec![false; labels.len()];
    for &i in pos.iter().chain(&neg) {
        keep[i] = true;
    }
    labels
        .iter()
        .map(|l| {
            if keep[l.anchor] {
                *l
            } else {
                AnchorLabel {
                    label: Label::Ignored,
                    matched: None,
                    ..*l
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::detector::anchors::{generate_anchors, AnchorSet};

    const RPN: LabelThresholds = LabelThresholds {
        positive: 0.7,
        negative: 0.3,
    };

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::tile(x, y, w, h).unwrap()
    }

    #[test]
    fn identical_far_and_middling_anchors() {
        let gt = [b(10.0, 10.0, 4.0, 4.0)];
        let anchors = [
            b(10.0, 10.0, 4.0, 4.0), // identical
            b(50.0, 50.0, 4.0, 4.0), // far
            b(10.0, 10.0, 4.0, 6.0), // IoU 16/24 = 0.67, not the best match
            b(11.0, 10.0, 4.0, 4.0), // IoU 12/20 = 0.6
            b(10.0, 10.0, 6.0, 6.0), // IoU 16/36 = 0.44
        ];
        let labels = label_anchors(&anchors, &gt, RPN);
        assert_eq!(labels[0].label, Label::Positive);
        assert_eq!(labels[0].matched, Some(0));
        assert_eq!(labels[1].label, Label::Negative);
        assert_eq!(labels[2].label, Label::Ignored);
        assert_eq!(labels[3].label, Label::Ignored);
        assert_eq!(labels[4].label, Label::Ignored);
    }

    #[test]
    fn anchor_with_half_overlap_is_ignored() {
        let gt = [b(0.0, 0.0, 4.0, 4.0), b(40.0, 40.0, 4.0, 4.0)];
        let anchors = [b(40.0, 40.0, 4.0, 4.0), b(0.0, 0.0, 4.0, 4.0), b(0.0, 0.0, 4.0, 8.0)];
        let labels = label_anchors(&anchors, &gt, RPN);
        // IoU(anchor 2, gt 0) = 16 / 32 = 0.5
        assert_eq!(labels[2].label, Label::Ignored);
    }

    #[test]
    fn empty_ground_truth_means_all_negative() {
        let anchors = generate_anchors(&AnchorSet::default(), (16, 16));
        let labels = label_anchors(&anchors, &[], RPN);
        assert!(labels.iter().all(|l| l.label == Label::Negative));
    }

    #[test]
    fn forced_match_when_no_anchor_reaches_threshold() {
        let gt = [b(3.0, 3.0, 5.0, 5.0)];
        let anchors = [b(0.0, 0.0, 4.0, 4.0), b(4.0, 4.0, 4.0, 4.0), b(60.0, 0.0, 4.0, 4.0)];
        let labels = label_anchors(&anchors, &gt, RPN);
        assert_eq!(labels[1].label, Label::Positive);
        assert_eq!(labels.iter().filter(|l| l.label == Label::Positive).count(), 1);
    }

    #[test]
    fn sampling_caps_positives() {
        let anchors = generate_anchors(&AnchorSet::default(), (101, 101));
        let gt: Vec<_> = (0..20).map(|i| b(5.0 * i as f64, 5.0 * i as f64, 8.0, 8.0)).collect();
        let labels = label_anchors(&anchors, &gt, RPN);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = sample_labels(&labels, 64, 0.25, &mut rng);
        let pos = s.iter().filter(|l| l.label == Label::Positive).count();
        let neg = s.iter().filter(|l| l.label == Label::Negative).count();
        assert!(pos <= 16);
        assert_eq!(pos + neg, 64);
    }
}
