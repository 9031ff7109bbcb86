use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

/// One composed similarity transform about the image center.
///
/// Forward mapping of a point `p` with center `c`:
/// `p' = c + scale * R(rotate_deg) * (flip(p) - c) + (tx * W, ty * H)`,
/// where positive angles turn the picture counter-clockwise as displayed
/// (y axis pointing down) and `flip` mirrors x about the center column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotate_deg: f64,
    pub translate_frac_x: f64,
    pub translate_frac_y: f64,
    pub scale: f64,
    pub hflip: bool,
}

impl Default for AffineParams {
    fn default() -> Self {
        AffineParams { rotate_deg: 0.0, translate_frac_x: 0.0, translate_frac_y: 0.0, scale: 1.0, hflip: false }
    }
}

impl AffineParams {
    pub fn is_identity(&self) -> bool {
        *self == AffineParams::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("affine scale must be positive, got {}", self.scale)));
        }
        if ![self.rotate_deg, self.translate_frac_x, self.translate_frac_y].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("affine parameters must be finite".into()));
        }
        Ok(())
    }

    fn frame(&self, width: usize, height: usize) -> Frame {
        let theta = self.rotate_deg.to_radians();
        Frame {
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            cos: theta.cos(),
            sin: theta.sin(),
            tx: self.translate_frac_x * width as f64,
            ty: self.translate_frac_y * height as f64,
            scale: self.scale,
            flip_w: if self.hflip { Some(width as f64 - 1.0) } else { None },
        }
    }

    /// Where a source point lands in the transformed image.
    pub fn map_point(&self, width: usize, height: usize, x: f64, y: f64) -> (f64, f64) {
        let f = self.frame(width, height);
        let x = f.flip_w.map_or(x, |w| w - x);
        let (dx, dy) = (x - f.cx, y - f.cy);
        (f.cx + f.scale * (f.cos * dx + f.sin * dy) + f.tx, f.cy + f.scale * (-f.sin * dx + f.cos * dy) + f.ty)
    }

    /// Source location read by output pixel `(x, y)`.
    pub fn inverse_point(&self, width: usize, height: usize, x: f64, y: f64) -> (f64, f64) {
        let f = self.frame(width, height);
        let (dx, dy) = ((x - f.cx - f.tx) / f.scale, (y - f.cy - f.ty) / f.scale);
        let sx = f.cx + f.cos * dx - f.sin * dy;
        let sy = f.cy + f.sin * dx + f.cos * dy;
        (f.flip_w.map_or(sx, |w| w - sx), sy)
    }
}

struct Frame {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    tx: f64,
    ty: f64,
    scale: f64,
    flip_w: Option<f64>,
}

/// Coordinates this close to an integer are treated as exact pixel hits so
/// quarter turns and flips permute pixels without interpolation error.
const SNAP: f64 = 1e-6;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Applies `params` by inverse mapping with bilinear sampling. Taps that fall
/// outside the source read `fill`.
pub fn affine_transform(img: &Image, params: &AffineParams, fill: f32) -> Result<Image> {
    params.validate()?;
    if params.is_identity() {
        return Ok(img.clone());
    }
    let (w, h) = (img.width, img.height);
    let mut out = Image::filled(img.channels, h, w, fill);
    for oy in 0..h {
        for ox in 0..w {
            let (sx, sy) = params.inverse_point(w, h, ox as f64, oy as f64);
            let (sx, sy) = (snap(sx), snap(sy));
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for c in 0..img.channels {
                let mut acc = 0.0f64;
                for &(tx, ty, wgt) in &taps {
                    if wgt == 0.0 {
                        continue;
                    }
                    let v = if tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64 {
                        img.at(c, ty as usize, tx as usize)
                    } else {
                        fill
                    };
                    acc += wgt * v as f64;
                }
                out.set(c, oy, ox, acc as f32);
            }
        }
    }
    Ok(out)
}
