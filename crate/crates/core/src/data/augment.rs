use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contour::{Contour, Heatmap};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Flip with probability 0.5 when enabled.
    pub hflip: bool,
    pub rotation_deg: [f64; 2],
    pub zoom: [f64; 2],
    /// Shift as a fraction of width/height, drawn independently per axis.
    pub shift_frac: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            rotation_deg: [-15.0, 15.0],
            zoom: [0.9, 1.1],
            shift_frac: [-0.1, 0.1],
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.rotation_deg) || self.rotation_deg[0] < -90.0 || self.rotation_deg[1] > 90.0 {
            return Err(invalid("rotation range must be ordered and within [-90, 90]"));
        }
        if !ordered(self.zoom) || self.zoom[0] <= 0.0 {
            return Err(invalid("zoom range must be ordered and strictly positive"));
        }
        if !ordered(self.shift_frac) {
            return Err(invalid("shift range must be ordered"));
        }
        Ok(())
    }
}

/// One concrete geometric transform. Rotation and zoom act about the image
/// centre after the optional flip; the shift is applied last.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub hflip: bool,
    pub rotation_deg: f64,
    pub zoom: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

fn draw(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            rotation_deg: 0.0,
            zoom: 1.0,
            shift_x: 0.0,
            shift_y: 0.0,
        }
    }

    pub fn sample(cfg: &AugmentationConfig, rng: &mut impl Rng) -> Self {
        Self {
            hflip: cfg.hflip && rng.gen_bool(0.5),
            rotation_deg: draw(rng, cfg.rotation_deg),
            zoom: draw(rng, cfg.zoom),
            shift_x: draw(rng, cfg.shift_frac),
            shift_y: draw(rng, cfg.shift_frac),
        }
    }

    /// Source point → destination point.
    pub fn forward(&self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let x = if self.hflip { w as f64 - 1.0 - x } else { x };
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (
            cx + self.zoom * (c * dx - s * dy) + self.shift_x * w as f64,
            cy + self.zoom * (s * dx + c * dy) + self.shift_y * h as f64,
        )
    }

    /// Destination point → source point.
    pub fn inverse(&self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let dx = (x - cx - self.shift_x * w as f64) / self.zoom;
        let dy = (y - cy - self.shift_y * h as f64) / self.zoom;
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let sx = cx + c * dx + s * dy;
        let sy = cy - s * dx + c * dy;
        let sx = if self.hflip { w as f64 - 1.0 - sx } else { sx };
        (sx, sy)
    }

    /// Resamples `img` through the transform, bilinearly, with zero fill.
    pub fn warp(&self, img: &Heatmap) -> Heatmap {
        let (w, h) = (img.width(), img.height());
        if *self == Self::identity() {
            return img.clone();
        }
        let mut out = Heatmap::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.inverse(x as f64, y as f64, w, h);
                out.set(x, y, bilinear(img, sx, sy).clamp(0.0, 1.0));
            }
        }
        out
    }

    /// Applies the transform to contour points and re-sorts them by x.
    pub fn apply_to_contour(&self, contour: &Contour, w: usize, h: usize) -> Contour {
        let mut out = contour.clone();
        for p in &mut out.points {
            let (x, y) = self.forward(p.x, p.y, w, h);
            p.x = x;
            p.y = y;
        }
        out.canonicalize();
        out
    }
}

fn bilinear(img: &Heatmap, x: f64, y: f64) -> f32 {
    let (w, h) = (img.width() as isize, img.height() as isize);
    if !(x > -1.0 && y > -1.0 && x < w as f64 && y < h as f64) {
        return 0.0;
    }
    let (x0, y0) = (x.floor() as isize, y.floor() as isize);
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let at = |xx: isize, yy: isize| -> f32 {
        if xx < 0 || yy < 0 || xx >= w || yy >= h {
            0.0
        } else {
            img.get(xx as usize, yy as usize)
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Applies one transform to a frame and its mask alike. The mask is clamped
/// to [0, 1] after interpolation.
pub fn augment_pair(
    frame: &Heatmap,
    mask: &Heatmap,
    params: &AffineParams,
) -> Result<(Heatmap, Heatmap)> {
    if frame.width() != mask.width() || frame.height() != mask.height() {
        return Err(Error::ShapeMismatch(format!(
            "frame {}x{} vs mask {}x{}",
            frame.width(),
            frame.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok((params.warp(frame), params.warp(mask)))
}
