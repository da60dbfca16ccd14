use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates, stored center-form.
///
/// Pixel `i` covers `[i, i + 1)`, so the center of a box covering pixels
/// `0..w` is `w / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// From corner form `(x, y, w, h)`.
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// Corner form `(x, y, w, h)`.
    pub fn to_corner(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Input(format!("invalid bounding box {self:?}")));
        }
        Ok(())
    }

    /// Intersection over union; zero for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        // areas from the same corner values as the intersection, so a box
        // overlaps itself with exactly 1
        let extent = |b: &BBox| (b.x1() - b.x0()) * (b.y1() - b.y0());
        (inter / (extent(self) + extent(other) - inter)).min(1.0)
    }

    /// Euclidean distance between centers.
    pub fn center_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }

    /// Clamps the box into a `width x height` frame, keeping at least
    /// `min_size` pixels per side.
    pub fn clamp_to(&self, width: f64, height: f64, min_size: f64) -> BBox {
        let w = self.w.clamp(min_size, width);
        let h = self.h.clamp(min_size, height);
        let cx = self.cx.clamp(w / 2.0, width - w / 2.0);
        let cy = self.cy.clamp(h / 2.0, height - h / 2.0);
        BBox { cx, cy, w, h }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0() && x <= self.x1() && y >= self.y0() && y <= self.y1()
    }
}
