use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinate frame a box is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    #[default]
    Tile,
    Section,
}

/// Axis-aligned box: top-left corner plus positive extents, in continuous
/// pixel coordinates (pixel `i` spans `[i, i + 1)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub frame: Frame,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, frame: Frame) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "box ({x}, {y}, {w}, {h}) needs finite coordinates and positive extents"
            )));
        }
        Ok(BoundingBox { x, y, w, h, frame })
    }

    pub fn tile(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, w, h, Frame::Tile)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64, frame: Frame) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h, frame)
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Clips to `[0, width] x [0, height]`; `None` when nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BoundingBox> {
        let x1 = self.x.max(0.0);
        let y1 = self.y.max(0.0);
        let x2 = self.x2().min(width);
        let y2 = self.y2().min(height);
        if x2 > x1 && y2 > y1 {
            Some(BoundingBox {
                x: x1,
                y: y1,
                w: x2 - x1,
                h: y2 - y1,
                frame: self.frame,
            })
        } else {
            None
        }
    }

    pub fn translate(&self, dx: f64, dy: f64, frame: Frame) -> BoundingBox {
        BoundingBox {
            x: self.x + dx,
            y: self.y + dy,
            frame,
            ..*self
        }
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.x < other.x2() && other.x < self.x2() && self.y < other.y2() && other.y < self.y2()
    }
}

/// Intersection over union.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A scored box. `score` is the softmax probability of the neuron class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::tile(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(1.0, 2.0, 3.0, 4.0), &b(1.0, 2.0, 3.0, 4.0)), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(5.0, 5.0, 2.0, 2.0)), 0.0);
        assert!((iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BoundingBox::tile(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::tile(0.0, 0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn clip_stays_inside() {
        let c = b(-2.0, 3.0, 10.0, 10.0).clip(5.0, 8.0).unwrap();
        assert_eq!((c.x, c.y, c.w, c.h), (0.0, 3.0, 5.0, 5.0));
        assert!(b(10.0, 10.0, 2.0, 2.0).clip(5.0, 5.0).is_none());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-20.0..20.0f64, -20.0..20.0f64, 0.1..15.0f64, 0.1..15.0f64).prop_map(|(x, y, w, h)| b(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - iou(&c, &a)).abs() < 1e-12);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            if !a.intersects(&c) {
                prop_assert_eq!(v, 0.0);
            }
        }
    }
}
