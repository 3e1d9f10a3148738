//! Axis-aligned boxes in image coordinates (origin top-left) and overlap.

use crate::error::{Error, Result};

/// Center/extent box in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::contract(format!(
                "degenerate box: cx={cx} cy={cy} w={w} h={h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_tlwh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// Top-left convention `(x, y, w, h)` used on disk.
    pub fn tlwh(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.w,
            self.h,
        )
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union in pixel coordinates, in [0,1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}
