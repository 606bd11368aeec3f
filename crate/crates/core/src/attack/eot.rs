//! Expectation-over-transformation draws and their application to a patch.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{bilinear_taps, SparseMap};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Closed interval `[lo, hi]` from which a transform parameter is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn symmetric(r: f64) -> Self {
        Self { lo: -r, hi: r }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::config(format!("{name} range [{}, {}] is not well-ordered", self.lo, self.hi)));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            // still consume a draw so streams stay aligned across configs
            let _: f64 = rng.random();
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EotConfig {
    pub contrast: Range,
    pub brightness: Range,
    /// Per-pixel additive uniform noise.
    pub noise: Range,
    pub rotation_deg: Range,
    /// Translation of the placement region as a fraction of the patch side.
    pub location: Range,
    pub samples_per_image: usize,
}

impl Default for EotConfig {
    fn default() -> Self {
        Self {
            contrast: Range::new(0.8, 1.2),
            brightness: Range::symmetric(0.1),
            noise: Range::symmetric(0.1),
            rotation_deg: Range::symmetric(20.0),
            location: Range::symmetric(0.1),
            samples_per_image: 1,
        }
    }
}

impl EotConfig {
    /// All ranges collapsed to the identity transform.
    pub fn identity() -> Self {
        Self {
            contrast: Range::point(1.0),
            brightness: Range::point(0.0),
            noise: Range::point(0.0),
            rotation_deg: Range::point(0.0),
            location: Range::point(0.0),
            samples_per_image: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.contrast.validate("contrast")?;
        self.brightness.validate("brightness")?;
        self.noise.validate("noise")?;
        self.rotation_deg.validate("rotation")?;
        self.location.validate("location")?;
        if self.samples_per_image == 0 {
            return Err(Error::config("samples_per_image must be >= 1"));
        }
        Ok(())
    }
}

/// One concrete draw from the transform family.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams {
    pub contrast: f64,
    pub brightness: f64,
    /// Additive noise field, shape `(3, H_p, W_p)`.
    pub noise: Tensor,
    pub rotation_deg: f64,
    pub dx: f64,
    pub dy: f64,
}

impl TransformParams {
    pub fn identity(patch_h: usize, patch_w: usize) -> Self {
        Self {
            contrast: 1.0,
            brightness: 0.0,
            noise: Tensor::zeros(vec![3, patch_h, patch_w]),
            rotation_deg: 0.0,
            dx: 0.0,
            dy: 0.0,
        }
    }

    /// Checks every parameter against `cfg`.
    pub fn within(&self, cfg: &EotConfig) -> bool {
        cfg.contrast.contains(self.contrast)
            && cfg.brightness.contains(self.brightness)
            && cfg.rotation_deg.contains(self.rotation_deg)
            && cfg.location.contains(self.dx)
            && cfg.location.contains(self.dy)
            && self.noise.data().iter().all(|&n| cfg.noise.contains(n))
    }
}

/// Draws one transform for a `(3, patch_h, patch_w)` patch.
pub fn sample_transform<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &EotConfig,
    patch_h: usize,
    patch_w: usize,
) -> TransformParams {
    let contrast = cfg.contrast.draw(rng);
    let brightness = cfg.brightness.draw(rng);
    let rotation_deg = cfg.rotation_deg.draw(rng);
    let dx = cfg.location.draw(rng);
    let dy = cfg.location.draw(rng);
    let noise = if cfg.noise.lo == cfg.noise.hi {
        Tensor::filled(vec![3, patch_h, patch_w], cfg.noise.lo)
    } else {
        let data = (0..3 * patch_h * patch_w).map(|_| cfg.noise.draw(rng)).collect();
        Tensor::new(vec![3, patch_h, patch_w], data).expect("noise shape")
    };
    TransformParams {
        contrast,
        brightness,
        noise,
        rotation_deg,
        dx,
        dy,
    }
}

/// A transformed patch plus its validity mask `(H_p, W_p)`; the mask is below
/// one where rotation pulled in zero padding.
#[derive(Debug, Clone, Copy)]
pub struct TransformedPatch {
    pub pixels: Var,
    pub mask: Var,
    pub height: usize,
    pub width: usize,
    pub dx: f64,
    pub dy: f64,
}

/// Inverse-mapped bilinear rotation about the patch centre, per channel,
/// zero-padded. Row `c·hw + p` pulls from channel `c` only.
fn rotation_map(h: usize, w: usize, channels: usize, deg: f64) -> SparseMap {
    let (s, c) = deg.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let hw = h * w;
    let mut b = SparseMap::builder(channels * hw);
    for ch in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 - cx, y as f64 - cy);
                let sx = c * u + s * v + cx;
                let sy = -s * u + c * v + cy;
                for (p, wt) in bilinear_taps(sx, sy, w, h, true) {
                    b.push(ch * hw + p, wt);
                }
                b.end_row();
            }
        }
    }
    b.build()
}

/// Contrast about 0.5, brightness, noise, rotation, clamp; in that order.
pub fn apply_transform(g: &mut Graph, patch: Var, params: &TransformParams) -> Result<TransformedPatch> {
    let &[3, h, w] = g.shape(patch) else {
        return Err(Error::shape(format!("patch must be (3, H, W), got {:?}", g.shape(patch))));
    };
    if params.noise.shape() != [3, h, w] {
        return Err(Error::shape(format!(
            "noise field {:?} vs patch (3, {h}, {w})",
            params.noise.shape()
        )));
    }
    let mut x = patch;
    if params.contrast != 1.0 {
        x = g.add_scalar(x, -0.5);
        x = g.scale(x, params.contrast);
        x = g.add_scalar(x, 0.5);
    }
    if params.brightness != 0.0 {
        x = g.add_scalar(x, params.brightness);
    }
    let x = g.offset(x, &params.noise);
    let (x, mask) = if params.rotation_deg == 0.0 {
        (x, g.constant(Tensor::filled(vec![h, w], 1.0)))
    } else {
        let rot = Arc::new(rotation_map(h, w, 3, params.rotation_deg));
        let mask_map = rotation_map(h, w, 1, params.rotation_deg);
        let mask = Tensor::new(vec![h, w], mask_map.row_sums())?;
        (g.linear(x, &rot, vec![3, h, w]), g.constant(mask))
    };
    let pixels = g.clamp(x, 0.0, 1.0);
    Ok(TransformedPatch {
        pixels,
        mask,
        height: h,
        width: w,
        dx: params.dx,
        dy: params.dy,
    })
}

/// Value-level convenience wrapper around [`apply_transform`].
pub fn transform_patch(patch: &Tensor, params: &TransformParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.constant(patch.clone());
    let t = apply_transform(&mut g, p, params)?;
    Ok(g.value(t.pixels).clone())
}
