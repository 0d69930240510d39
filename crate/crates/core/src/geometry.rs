//! Axis-aligned boxes.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub const fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f32 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn right(&self) -> f32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f32 {
        self.y + self.h
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// True when the box has positive extent and lies within a `width` x `height` image.
    pub fn inside(&self, width: usize, height: usize) -> bool {
        const SLACK: f32 = 1e-3;
        self.w > 0.0
            && self.h > 0.0
            && self.x >= -SLACK
            && self.y >= -SLACK
            && self.right() <= width as f32 + SLACK
            && self.bottom() <= height as f32 + SLACK
    }

    /// Clips the box to the image rectangle. The result may be degenerate.
    pub fn clip(&self, width: usize, height: usize) -> BBox {
        let x0 = self.x.clamp(0.0, width as f32);
        let y0 = self.y.clamp(0.0, height as f32);
        let x1 = self.right().clamp(0.0, width as f32);
        let y1 = self.bottom().clamp(0.0, height as f32);
        BBox::new(x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0))
    }

    /// Whether the point lies strictly inside the box.
    pub fn contains(&self, px: f32, py: f32) -> bool {
        px > self.x && px < self.right() && py > self.y && py < self.bottom()
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix0 = a.x.max(b.x) as f64;
    let iy0 = a.y.max(b.y) as f64;
    let ix1 = a.right().min(b.right()) as f64;
    let iy1 = a.bottom().min(b.bottom()) as f64;
    let inter = (ix1 - ix0).max(0.0) * (iy1 - iy0).max(0.0);
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_fixtures() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        let empty = BBox::new(0.0, 0.0, 0.0, 0.0);
        assert_eq!(iou(&empty, &empty), 0.0);
    }

    #[test]
    fn clip_keeps_box_in_frame() {
        let b = BBox::new(-5.0, 8.0, 20.0, 10.0).clip(10, 12);
        assert_eq!(b, BBox::new(0.0, 8.0, 10.0, 4.0));
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            ax in -50f32..50., ay in -50f32..50., aw in 0f32..40., ah in 0f32..40.,
            bx in -50f32..50., by in -50f32..50., bw in 0f32..40., bh in 0f32..40.,
        ) {
            let a = BBox::new(ax, ay, aw, ah);
            let b = BBox::new(bx, by, bw, bh);
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
