//! Differentiable compositing of a transformed patch onto a person box.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{covered_pixels, BBox};
use crate::sparse::{bilinear_taps, SparseMap};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

use super::eot::TransformedPatch;

/// Continuous placement square and the pixels it covers after clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementRegion {
    pub side: f64,
    pub x0: f64,
    pub y0: f64,
    pub xs: Range<usize>,
    pub ys: Range<usize>,
    pub clipped: bool,
}

impl PlacementRegion {
    /// Square of side `scale · bbox_height` centred on the box and shifted by
    /// `(dx · side, dy · side)`.
    pub fn compute(bbox: &BBox, scale: f64, dx: f64, dy: f64, width: usize, height: usize) -> Result<Self> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&scale) {
            return Err(Error::invalid(format!("patch scale {scale} outside (0, 1]")));
        }
        if !bbox.inside(width, height) {
            return Err(Error::invalid(format!("box {bbox:?} is not inside the {width}x{height} image")));
        }
        let side = scale * bbox.height();
        let (x0, y0, x1, y1) = bbox.centered_square(side, dx * side, dy * side);
        let (xs, ys, clipped) = covered_pixels(x0, y0, x1, y1, width, height);
        Ok(Self {
            side,
            x0,
            y0,
            xs,
            ys,
            clipped,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty() || self.ys.is_empty()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.xs.contains(&x) && self.ys.contains(&y)
    }
}

/// Result of one placement: the new image and where the patch went.
#[derive(Debug, Clone)]
pub struct Placed {
    pub image: Var,
    pub region: PlacementRegion,
}

/// `image ⊙ (1 − m) + resample(patch)` over the placement region.
///
/// `image` is `(3, H, W)` and may itself be the output of an earlier
/// placement. Pixels outside the region are passed through unchanged bit for
/// bit. A region leaving the image is clipped with a warning.
pub fn place_patch(g: &mut Graph, image: Var, patch: &TransformedPatch, bbox: &BBox, scale: f64) -> Result<Placed> {
    let &[3, h, w] = g.shape(image) else {
        return Err(Error::shape(format!("image must be (3, H, W), got {:?}", g.shape(image))));
    };
    let region = PlacementRegion::compute(bbox, scale, patch.dx, patch.dy, w, h)?;
    if region.clipped {
        log::warn!("placement region for {bbox:?} leaves the {w}x{h} image and was clipped");
    }
    if region.is_empty() {
        return Ok(Placed { image, region });
    }

    let (ph, pw) = (patch.height, patch.width);
    let (hw, phw) = (h * w, ph * pw);
    let mask = g.value(patch.mask).data().to_vec();
    let mut keep = vec![1.0; 3 * hw];
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); hw];
    for y in region.ys.clone() {
        let v = (y as f64 + 0.5 - region.y0) / region.side * ph as f64 - 0.5;
        for x in region.xs.clone() {
            let u = (x as f64 + 0.5 - region.x0) / region.side * pw as f64 - 0.5;
            let taps: Vec<_> = bilinear_taps(u, v, pw, ph, false).collect();
            let m: f64 = taps.iter().map(|&(p, wt)| wt * mask[p]).sum();
            for c in 0..3 {
                keep[c * hw + y * w + x] = 1.0 - m;
            }
            rows[y * w + x] = taps;
        }
    }
    let mut b = SparseMap::builder(3 * phw);
    for c in 0..3 {
        for taps in &rows {
            for &(p, wt) in taps {
                b.push(c * phw + p, wt);
            }
            b.end_row();
        }
    }
    let resampled = g.linear(patch.pixels, &Arc::new(b.build()), vec![3, h, w]);
    let keep = g.constant(Tensor::new(vec![3, h, w], keep)?);
    let background = g.mul(image, keep);
    Ok(Placed {
        image: g.add(background, resampled),
        region,
    })
}
