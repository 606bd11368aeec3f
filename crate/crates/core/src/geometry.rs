use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `(x1, y1, x2, y2)` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::invalid(format!("degenerate box {self:?}")));
        }
        Ok(())
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
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width as f64 && self.y2 <= height as f64
    }

    /// Square of side `side` centred on this box, shifted by `(dx, dy)` pixels.
    pub fn centered_square(&self, side: f64, dx: f64, dy: f64) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center();
        let (cx, cy) = (cx + dx, cy + dy);
        (cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0)
    }
}

/// Integer pixel indices whose centres fall inside `[x0, x1) × [y0, y1)`,
/// clipped to the image. Returns `(xs, ys, clipped)`.
pub(crate) fn covered_pixels(
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    width: usize,
    height: usize,
) -> (std::ops::Range<usize>, std::ops::Range<usize>, bool) {
    let span = |lo: f64, hi: f64, n: usize| {
        // pixel p is covered when lo <= p + 0.5 < hi
        let a = (lo - 0.5).ceil().max(0.0);
        let b = (hi - 0.5).ceil().min(n as f64);
        let (a, b) = (a as usize, b.max(a) as usize);
        (a..b, lo < 0.0 || hi > n as f64)
    };
    let (xs, cx) = span(x0, x1, width);
    let (ys, cy) = span(y0, y1, height);
    (xs, ys, cx || cy)
}
