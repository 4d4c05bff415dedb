//! Box-regression utilities: IoU, Complete-IoU loss and the weighted
//! three-term detector loss.
//!
//! Boxes are stored as corners. The aspect-ratio term follows the usual CIoU
//! definition, `v = 4/π² (atan(w_gt/h_gt) − atan(w/h))²` with
//! `α = v / ((1 − IoU) + v)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("loss inputs must be finite and non-negative, got {0}")]
    NegativeInput(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, DetectionError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.check()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, DetectionError> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    /// `(cx, cy, w, h)`
    pub fn to_center(&self) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center();
        (cx, cy, self.width(), self.height())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    fn check(&self) -> Result<(), DetectionError> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(DetectionError::DegenerateBox(format!("{self:?}")));
        }
        Ok(())
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    w * h
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64, DetectionError> {
    a.check()?;
    b.check()?;
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

pub fn ciou_loss(pred: &BBox, gt: &BBox) -> Result<f64, DetectionError> {
    let iou = iou(pred, gt)?;

    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let enclose_w = pred.x_max.max(gt.x_max) - pred.x_min.min(gt.x_min);
    let enclose_h = pred.y_max.max(gt.y_max) - pred.y_min.min(gt.y_min);
    let c2 = enclose_w.powi(2) + enclose_h.powi(2);

    let v = 4.0 / (PI * PI) * ((gt.width() / gt.height()).atan() - (pred.width() / pred.height()).atan()).powi(2);
    let alpha = if v == 0.0 { 0.0 } else { v / ((1.0 - iou) + v) };

    Ok(1.0 - iou + rho2 / c2 + alpha * v)
}

/// Loss weights for [`yolo_composite_loss`]. There are no defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub box_weight: f64,
    pub cls_weight: f64,
    pub obj_weight: f64,
}

pub fn yolo_composite_loss(l_box: f64, l_cls: f64, l_obj: f64, weights: LossWeights) -> Result<f64, DetectionError> {
    let inputs = [
        l_box,
        l_cls,
        l_obj,
        weights.box_weight,
        weights.cls_weight,
        weights.obj_weight,
    ];
    if let Some(bad) = inputs.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(DetectionError::NegativeInput(*bad));
    }
    Ok(weights.box_weight * l_box + weights.cls_weight * l_cls + weights.obj_weight * l_obj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_boxes() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        let flat = BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 2.0,
            y_max: 0.0,
        };
        assert!(matches!(
            iou(&flat, &b(0.0, 0.0, 1.0, 1.0)),
            Err(DetectionError::DegenerateBox(_))
        ));
        assert!(ciou_loss(&flat, &flat).is_err());
    }

    #[test]
    fn ciou_examples() {
        let a = b(0.0, 0.0, 2.0, 3.0);
        assert!(ciou_loss(&a, &a).unwrap().abs() < 1e-9);

        // Same center and aspect ratio, predicted box half the size.
        let gt = b(0.0, 0.0, 4.0, 4.0);
        let pred = b(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&pred, &gt).unwrap() - 0.25).abs() < 1e-12);
        assert!((ciou_loss(&pred, &gt).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ciou_disjoint_hand_value() {
        // Unit squares one apart horizontally: IoU 0, rho^2 = 4,
        // enclosing 3x1 so c^2 = 10, equal aspect so v = 0.
        let l = ciou_loss(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 0.0, 3.0, 1.0)).unwrap();
        assert!((l - 1.4).abs() < 1e-12);
    }

    #[test]
    fn center_conversion() {
        let a = BBox::from_center(2.0, 3.0, 4.0, 2.0).unwrap();
        assert_eq!(a, b(0.0, 2.0, 4.0, 4.0));
        assert_eq!(a.to_center(), (2.0, 3.0, 4.0, 2.0));
    }

    #[test]
    fn composite_loss_examples() {
        let w = |a, b, c| LossWeights {
            box_weight: a,
            cls_weight: b,
            obj_weight: c,
        };
        assert_eq!(yolo_composite_loss(1.0, 2.0, 3.0, w(0.0, 0.0, 0.0)).unwrap(), 0.0);
        assert!((yolo_composite_loss(1.0, 2.0, 3.0, w(0.5, 0.3, 0.2)).unwrap() - 1.7).abs() < 1e-12);
        assert_eq!(yolo_composite_loss(1.5, 2.0, 3.0, w(1.0, 0.0, 0.0)).unwrap(), 1.5);
        assert_eq!(
            yolo_composite_loss(-1.0, 2.0, 3.0, w(1.0, 0.0, 0.0)),
            Err(DetectionError::NegativeInput(-1.0))
        );
    }

    fn any_box() -> impl Strategy<Value = BBox> {
        (-50.0f64..50.0, -50.0f64..50.0, 0.1f64..30.0, 0.1f64..30.0).prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric(a in any_box(), c in any_box()) {
            prop_assert_eq!(iou(&a, &c).unwrap(), iou(&c, &a).unwrap());
        }

        #[test]
        fn ciou_bounded_below(a in any_box(), c in any_box()) {
            prop_assert_eq!(ciou_loss(&a, &a).unwrap(), 0.0);
            prop_assert!(ciou_loss(&a, &c).unwrap() >= 1.0 - iou(&a, &c).unwrap());
        }

        #[test]
        fn translation_invariant(a in any_box(), c in any_box(), dx in -100.0f64..100.0, dy in -100.0f64..100.0) {
            let (ta, tc) = (a.translate(dx, dy), c.translate(dx, dy));
            prop_assert!((iou(&a, &c).unwrap() - iou(&ta, &tc).unwrap()).abs() < 1e-9);
            prop_assert!((ciou_loss(&a, &c).unwrap() - ciou_loss(&ta, &tc).unwrap()).abs() < 1e-9);
        }
    }
}
