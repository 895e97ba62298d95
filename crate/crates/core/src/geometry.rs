use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixels: top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// Half-open containment: left/top edges inside, right/bottom outside.
    pub fn contains(&self, px: f32, py: f32) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    pub fn scaled(&self, s: f32) -> BBox {
        BBox::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    /// Part of the box inside a `width x height` frame.
    pub fn clamp_to(&self, width: usize, height: usize) -> Option<BBox> {
        self.intersection(&BBox::new(0.0, 0.0, width as f32, height as f32))
    }
}

/// Intersection over union in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let inter = a.intersection(b).map_or(0.0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 0.0, 10.0, 10.0)), 0.0);
        let half = iou(&a, &BBox::new(5.0, 0.0, 10.0, 10.0));
        assert!((half - 50.0 / 150.0).abs() < 1e-6);
    }

    #[test]
    fn touching_boxes_do_not_intersect() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert!(a.intersection(&BBox::new(10.0, 0.0, 5.0, 5.0)).is_none());
    }

    #[test]
    fn clamp_keeps_inside_part() {
        let b = BBox::new(-5.0, 90.0, 20.0, 20.0).clamp_to(100, 100).unwrap();
        assert_eq!(b, BBox::new(0.0, 90.0, 15.0, 10.0));
        assert!(BBox::new(200.0, 0.0, 5.0, 5.0).clamp_to(100, 100).is_none());
    }
}
