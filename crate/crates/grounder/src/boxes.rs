//! Bounding boxes, IoU / GIoU geometry and Pr@tau metrics.
//!
//! Boxes are normalized center form (cx, cy, w, h); corner form is derived.
//! All functions here are pure f64; the differentiable loss path in the model
//! recomputes the same geometry through the tape and is tested against these.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BoxError {
    #[error("degenerate box: w or h <= 0 (w={w}, h={h})")]
    DegenerateBox { w: f64, h: f64 },
    #[error("empty list")]
    EmptyList,
    #[error("prediction/ground-truth length mismatch ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        if !(w > 0.0 && h > 0.0) {
            return Err(BoxError::DegenerateBox { w, h });
        }
        Ok(BoundingBox { cx, cy, w, h })
    }

    /// (x1, y1, x2, y2)
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        BoundingBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, BoxError> {
    check(a)?;
    check(b)?;
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// GIoU = IoU - (area(C) - area(A u B)) / area(C), C the smallest enclosing box.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, BoxError> {
    check(a)?;
    check(b)?;
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let enclosing = cw * ch;
    Ok(inter / union - (enclosing - union) / enclosing)
}

/// Fraction of pairs whose IoU meets the threshold.
pub fn precision_at(
    preds: &[BoundingBox],
    gts: &[BoundingBox],
    tau: f64,
) -> Result<f64, BoxError> {
    if preds.is_empty() {
        return Err(BoxError::EmptyList);
    }
    if preds.len() != gts.len() {
        return Err(BoxError::LengthMismatch(preds.len(), gts.len()));
    }
    let mut hits = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        if iou(p, g)? >= tau {
            hits += 1;
        }
    }
    Ok(hits as f64 / preds.len() as f64)
}

fn check(b: &BoundingBox) -> Result<(), BoxError> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(BoxError::DegenerateBox { w: b.w, h: b.h });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub giou_loss: f64,
    pub total: f64,
}

/// L1 (mean over the four components) + (1 - GIoU), weighted.
pub fn grounding_loss(
    pred: &BoundingBox,
    gt: &BoundingBox,
    lambda_l1: f64,
    lambda_giou: f64,
) -> Result<LossBreakdown, BoxError> {
    let l1 = ((pred.cx - gt.cx).abs()
        + (pred.cy - gt.cy).abs()
        + (pred.w - gt.w).abs()
        + (pred.h - gt.h).abs())
        / 4.0;
    let giou_loss = 1.0 - giou(pred, gt)?;
    Ok(LossBreakdown { l1, giou_loss, total: lambda_l1 * l1 + lambda_giou * giou_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corner_box(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::from_corners(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn identical_boxes_giou_one() {
        let a = BoundingBox::new(0.5, 0.5, 0.4, 0.3).unwrap();
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_boxes_closed_form() {
        // IoU 0, union 2, enclosing 3 -> GIoU = -1/3
        let a = corner_box(0.0, 0.0, 1.0, 1.0);
        let b = corner_box(2.0, 0.0, 3.0, 1.0);
        let g = giou(&a, &b).unwrap();
        assert!((g - (-1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_giou_zero() {
        let a = corner_box(0.0, 0.0, 1.0, 1.0);
        let b = corner_box(1.0, 0.0, 2.0, 1.0);
        assert!(giou(&a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn giou_symmetric_and_below_iou() {
        let a = BoundingBox::new(0.3, 0.4, 0.2, 0.5).unwrap();
        let b = BoundingBox::new(0.6, 0.5, 0.4, 0.2).unwrap();
        assert_eq!(giou(&a, &b).unwrap(), giou(&b, &a).unwrap());
        assert!(giou(&a, &b).unwrap() <= iou(&a, &b).unwrap());
    }

    #[test]
    fn degenerate_box_rejected() {
        let a = BoundingBox::new(0.5, 0.5, 0.4, 0.3).unwrap();
        let bad = BoundingBox { cx: 0.5, cy: 0.5, w: 0.0, h: 0.2 };
        assert!(matches!(giou(&a, &bad), Err(BoxError::DegenerateBox { .. })));
    }

    #[test]
    fn loss_zero_when_equal() {
        let a = BoundingBox::new(0.5, 0.5, 0.4, 0.3).unwrap();
        let l = grounding_loss(&a, &a, 1.0, 1.0).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn loss_matches_direct_evaluation() {
        let pred = BoundingBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        let gt = BoundingBox::new(0.25, 0.25, 0.25, 0.25).unwrap();
        let l = grounding_loss(&pred, &gt, 1.0, 1.0).unwrap();
        // l1 = (0.25 + 0.25 + 0.25 + 0.25) / 4 = 0.25
        assert!((l.l1 - 0.25).abs() < 1e-12);
        // inter = 0.125^2, union = 0.25 + 0.0625 - inter, enclosing = 0.625^2
        let inter = 0.125 * 0.125;
        let union = 0.25 + 0.0625 - inter;
        let c = 0.625 * 0.625;
        let expected_giou = inter / union - (c - union) / c;
        assert!((l.giou_loss - (1.0 - expected_giou)).abs() < 1e-12);
        assert_eq!(l.total, l.l1 + l.giou_loss);
    }

    #[test]
    fn lambda_zero_drops_term() {
        let pred = BoundingBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        let gt = BoundingBox::new(0.25, 0.25, 0.25, 0.25).unwrap();
        let l = grounding_loss(&pred, &gt, 0.0, 2.0).unwrap();
        assert_eq!(l.total, 2.0 * l.giou_loss);
    }

    #[test]
    fn precision_counts_threshold_hits() {
        // contained boxes: IoU equals the area ratio, so pick {0.6, 0.4, 0.9}
        let gts = vec![corner_box(0.0, 0.0, 1.0, 1.0); 3];
        let preds = vec![
            corner_box(0.0, 0.0, 1.0, 0.6),
            corner_box(0.0, 0.0, 1.0, 0.4),
            corner_box(0.0, 0.0, 1.0, 0.9),
        ];
        let p = precision_at(&preds, &gts, 0.5).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn precision_trivial_cases() {
        let a = vec![corner_box(0.0, 0.0, 1.0, 1.0); 3];
        assert_eq!(precision_at(&a, &a, 1.0).unwrap(), 1.0);
        let b = vec![corner_box(2.0, 2.0, 3.0, 3.0); 3];
        assert_eq!(precision_at(&a, &b, 0.5).unwrap(), 0.0);
        assert_eq!(precision_at(&[], &[], 0.5), Err(BoxError::EmptyList));
    }

    #[test]
    fn scale_invariance() {
        let a = BoundingBox::new(0.3, 0.4, 0.2, 0.5).unwrap();
        let b = BoundingBox::new(0.6, 0.5, 0.4, 0.2).unwrap();
        let k = 7.3;
        let scale = |x: &BoundingBox| BoundingBox {
            cx: x.cx * k,
            cy: x.cy * k,
            w: x.w * k,
            h: x.h * k,
        };
        assert!((giou(&a, &b).unwrap() - giou(&scale(&a), &scale(&b)).unwrap()).abs() < 1e-9);
        assert!((iou(&a, &b).unwrap() - iou(&scale(&a), &scale(&b)).unwrap()).abs() < 1e-9);
    }

}
