//! Geometric training-time augmentation of an image and its mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::{Mask, RgbImage};

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.25);
pub const MAX_ROTATION_DEG: f64 = 10.0;
/// Largest shift as a fraction of the image side.
pub const MAX_SHIFT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub scale: bool,
    pub rotate: bool,
    pub shift: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { hflip: true, scale: true, rotate: true, shift: true }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { hflip: false, scale: false, rotate: false, shift: false }
    }

    pub fn is_identity(&self) -> bool {
        !(self.hflip || self.scale || self.rotate || self.shift)
    }
}

/// Similarity transform about the image centre, optionally mirrored:
/// `p' = c + t + s * R(theta) * F * (p - c)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub flip: bool,
    pub scale: f64,
    pub angle: f64,
    /// Shift in pixels `(dx, dy)`.
    pub shift: (f64, f64),
}

impl Default for Affine {
    fn default() -> Self {
        Affine { flip: false, scale: 1.0, angle: 0.0, shift: (0.0, 0.0) }
    }
}

impl Affine {
    /// Random transform within the enabled ranges.
    pub fn sample<R: Rng>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> Self {
        let mut a = Affine::default();
        if cfg.hflip {
            a.flip = rng.random_bool(0.5);
        }
        if cfg.scale {
            let (lo, hi) = SCALE_RANGE;
            a.scale = (rng.random_range(lo.ln()..=hi.ln())).exp();
        }
        if cfg.rotate {
            a.angle = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
        }
        if cfg.shift {
            a.shift = (
                rng.random_range(-MAX_SHIFT..=MAX_SHIFT) * w as f64,
                rng.random_range(-MAX_SHIFT..=MAX_SHIFT) * h as f64,
            );
        }
        a.clamped()
    }

    /// Parameters pulled back into the supported ranges.
    pub fn clamped(mut self) -> Self {
        self.scale = if self.scale.is_finite() { self.scale.clamp(SCALE_RANGE.0, SCALE_RANGE.1) } else { 1.0 };
        let max = MAX_ROTATION_DEG.to_radians();
        self.angle = if self.angle.is_finite() { self.angle.clamp(-max, max) } else { 0.0 };
        self
    }

    fn is_pure_flip(&self) -> bool {
        self.scale == 1.0 && self.angle == 0.0 && self.shift == (0.0, 0.0)
    }

    /// Source position of output pixel `(x, y)`.
    fn source(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (dx, dy) = ((x - cx - self.shift.0) / self.scale, (y - cy - self.shift.1) / self.scale);
        let (sin, cos) = self.angle.sin_cos();
        let (mut u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
        if self.flip {
            u = -u;
        }
        (cx + u, cy + v)
    }

    /// Warps an image (bilinear, zero outside) and its mask (nearest).
    pub fn apply(&self, image: &RgbImage, mask: &Mask) -> (RgbImage, Mask) {
        if self.is_pure_flip() {
            return if self.flip {
                (image.flipped_horizontal(), mask.flipped_horizontal())
            } else {
                (image.clone(), mask.clone())
            };
        }
        let (h, w) = (image.height, image.width);
        let mut out = RgbImage::new(h, w);
        let mut m = Mask::new(mask.height, mask.width);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x as f64, y as f64, h, w);
                if let Some(px) = bilinear(image, sx, sy) {
                    for (c, v) in px.into_iter().enumerate() {
                        out.set(c, y, x, v);
                    }
                }
            }
        }
        let (mh, mw) = (mask.height, mask.width);
        for y in 0..mh {
            for x in 0..mw {
                let (sx, sy) = self.source(x as f64, y as f64, mh, mw);
                let (rx, ry) = (sx.round(), sy.round());
                if rx >= 0.0 && ry >= 0.0 && (rx as usize) < mw && (ry as usize) < mh && mask.get(ry as usize, rx as usize) {
                    m.data[y * mw + x] = 1;
                }
            }
        }
        (out, m)
    }
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> Option<[f32; 3]> {
    let (h, w) = (img.height as f64, img.width as f64);
    if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
        return None;
    }
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let mut px = [0.0; 3];
    for (c, p) in px.iter_mut().enumerate() {
        let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
        let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
        *p = top * (1.0 - fy) + bottom * fy;
    }
    Some(px)
}

/// Applies one random transform to an image/mask pair.
pub fn augment_pair<R: Rng>(image: &RgbImage, mask: &Mask, cfg: &AugmentConfig, rng: &mut R) -> (RgbImage, Mask) {
    if cfg.is_identity() {
        return (image.clone(), mask.clone());
    }
    Affine::sample(cfg, image.height, image.width, rng).apply(image, mask)
}
