use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::math;

/// Widest log-scale change a decoded delta may apply.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Axis-aligned box in pixel coordinates, half-open `[x1, x2) × [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Bbox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            return Err(invalid("box needs x1 < x2 and y1 < y2"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Square box of side `size` centred at `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, size: f64) -> Self {
        let h = size / 2.0;
        Self {
            x1: cx - h,
            y1: cy - h,
            x2: cx + h,
            y2: cy + h,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Clips to `[0, w] × [0, h]`, keeping at least one pixel of extent.
    pub fn clip(&self, w: f64, h: f64) -> Self {
        let (x1, x2) = clip_span(self.x1, self.x2, w);
        let (y1, y2) = clip_span(self.y1, self.y2, h);
        Self { x1, y1, x2, y2 }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

fn clip_span(a: f64, b: f64, limit: f64) -> (f64, f64) {
    let a = a.clamp(0.0, limit);
    let b = b.clamp(0.0, limit);
    if b - a >= 1.0 {
        (a, b)
    } else {
        let lo = a.min(limit - 1.0).max(0.0);
        (lo, (lo + 1.0).min(limit))
    }
}

/// Intersection over union; zero for disjoint boxes.
pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Regression target `(dx, dy, dw, dh)` moving `reference` onto `target`.
pub fn encode(reference: &Bbox, target: &Bbox) -> [f64; 4] {
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    [
        (tx - rx) / reference.width(),
        (ty - ry) / reference.height(),
        math::ln(target.width() / reference.width()),
        math::ln(target.height() / reference.height()),
    ]
}

/// Inverse of [`encode`]; scale deltas are clamped to avoid overflow.
pub fn decode(reference: &Bbox, d: &[f64]) -> Bbox {
    let (rx, ry) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let cx = rx + d[0] * rw;
    let cy = ry + d[1] * rh;
    let w = rw * math::exp(d[2].min(MAX_LOG_SCALE));
    let h = rh * math::exp(d[3].min(MAX_LOG_SCALE));
    Bbox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}

/// Greedy score-ordered suppression; returns kept indices in score order.
/// Equal scores keep their input order.
pub fn nms(boxes: &[Bbox], scores: &[f64], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            keep.push(i);
        }
    }
    keep
}
