//! Axis-aligned boxes and scored detections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box coordinates must be finite"));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::invalid(format!(
                "degenerate box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Area of the overlap with `other`; 0 when the interiors are disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Overlap rectangle with `other`, `None` when it has no area.
    pub fn clip_to(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        )
        .ok()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// A scored box on a named image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection")]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    score: f64,
    pub class_id: u32,
}

#[derive(Deserialize)]
struct RawDetection {
    image_id: String,
    #[serde(rename = "box")]
    bbox: BBox,
    score: f64,
    class_id: u32,
}

impl TryFrom<RawDetection> for Detection {
    type Error = Error;

    fn try_from(r: RawDetection) -> Result<Self> {
        Detection::new(r.image_id, r.bbox, r.score, r.class_id)
    }
}

impl Detection {
    pub fn new(image_id: impl Into<String>, bbox: BBox, score: f64, class_id: u32) -> Result<Self> {
        check_unit(score, "score")?;
        Ok(Self {
            image_id: image_id.into(),
            bbox,
            score,
            class_id,
        })
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn with_score(&self, score: f64) -> Result<Self> {
        check_unit(score, "score")?;
        Ok(Self {
            score,
            ..self.clone()
        })
    }

    pub fn with_box(&self, bbox: BBox) -> Self {
        Self {
            bbox,
            ..self.clone()
        }
    }
}

pub(crate) fn check_unit(v: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!("{what} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        // overlap 1x2 = 2, union 4 + 4 - 2 = 6
        assert!((iou(&a, &b(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn touching_edges_do_not_overlap() {
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn rejects_degenerate_boxes_and_scores() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(Detection::new("a", b(0.0, 0.0, 1.0, 1.0), 1.5, 0).is_err());
    }

    #[test]
    fn detection_json_shape() {
        let d = Detection::new("img", b(1.0, 2.0, 3.0, 4.0), 0.5, 0).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"image_id":"img","box":[1.0,2.0,3.0,4.0],"score":0.5,"class_id":0}"#);
        let back: Detection = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
        assert!(serde_json::from_str::<Detection>(
            r#"{"image_id":"i","box":[0,0,1,1],"score":2.0,"class_id":0}"#
        )
        .is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.1..30.0f64, 0.1..30.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-15);
        }
    }
}
