use super::bbox::{iou, Detection};

/// Greedy non-maximum suppression: visit detections by descending score
/// (input order breaks ties) and drop any whose IoU with an already kept box
/// exceeds `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = detections[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::detector::bbox::BoundingBox;

    fn det(x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection {
            bbox: BoundingBox::tile(x, y, w, h).unwrap(),
            score,
        }
    }

    #[test]
    fn identical_boxes_keep_best() {
        let out = nms(&[det(0.0, 0.0, 4.0, 4.0, 0.8), det(0.0, 0.0, 4.0, 4.0, 0.9)], 0.3);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn disjoint_boxes_all_kept() {
        let out = nms(&[det(0.0, 0.0, 2.0, 2.0, 0.5), det(10.0, 0.0, 2.0, 2.0, 0.6)], 0.3);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn chain_keeps_first_and_third() {
        // Neighbors overlap by 2/3 of their width: IoU = 4 / 8 = 0.5. The
        // ends overlap by 1/3: IoU = 2 / 10 = 0.2.
        let a = det(0.0, 0.0, 3.0, 2.0, 0.9);
        let b = det(1.0, 0.0, 3.0, 2.0, 0.8);
        let c = det(2.0, 0.0, 3.0, 2.0, 0.7);
        assert!((iou(&a.bbox, &b.bbox) - 0.5).abs() < 1e-12);
        assert!((iou(&b.bbox, &c.bbox) - 0.5).abs() < 1e-12);
        let out = nms(&[a, b, c], 0.3);
        assert_eq!(out, vec![a, c]);
    }

    proptest! {
        #[test]
        fn idempotent(boxes in prop::collection::vec((0.0..50.0f64, 0.0..50.0f64, 1.0..12.0f64, 0.0..1.0f64), 0..30),
                      threshold in 0.0..1.0f64) {
            let dets: Vec<_> = boxes.iter().map(|&(x, y, s, p)| det(x, y, s, s, p)).collect();
            let once = nms(&dets, threshold);
            let twice = nms(&once, threshold);
            prop_assert_eq!(&once, &twice);
            for (i, a) in once.iter().enumerate() {
                for b in &once[i + 1..] {
                    prop_assert!(iou(&a.bbox, &b.bbox) <= threshold);
                }
            }
        }
    }
}
