use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Real, Tensor};

/// Planar 8-bit RGB image, `[3, height, width]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(dim_err!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                3 * width * height,
                data.len()
            ));
        }
        Ok(RgbImage { width, height, data })
    }

    /// From interleaved `RGBRGB...` bytes as stored by PPM and PNG.
    pub fn from_interleaved(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let n = width * height;
        if bytes.len() != 3 * n {
            return Err(dim_err!("{}x{} interleaved RGB needs {} bytes, got {}", width, height, 3 * n, bytes.len()));
        }
        let mut data = vec![0u8; 3 * n];
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c];
            }
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn to_interleaved(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push(self.data[c * n + i]);
            }
        }
        out
    }
}

/// Real-valued planar image `[channels, height, width]`, values on the 0..255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(dim_err!("image [{channels},{height},{width}] with {} values", data.len()));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image { channels, height, width, data: vec![value; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Rounds to the nearest byte, saturating at 0 and 255.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(dim_err!("to_rgb8 needs 3 channels, image has {}", self.channels));
        }
        let data = self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::new(self.width, self.height, data)
    }
}

impl From<&RgbImage> for Image {
    fn from(img: &RgbImage) -> Self {
        Image { channels: 3, height: img.height, width: img.width, data: img.data.iter().map(|&v| v as f32).collect() }
    }
}

/// Bilinear resize with corner-aligned sampling: output pixel `i` reads the
/// source at `i * (in - 1) / (out - 1)`, so the four corner pixels map onto
/// the source corners exactly. A one-pixel output axis samples the source
/// center.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 || img.height == 0 || img.width == 0 {
        return Err(dim_err!("resize {}x{} -> {}x{}: extents must be positive", img.height, img.width, out_h, out_w));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let src = if n_out == 1 { (n_in - 1) as f64 / 2.0 } else { i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64 };
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|y| coord(y, img.height, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| coord(x, img.width, out_w)).collect();
    let mut out = Image::filled(img.channels, out_h, out_w, 0.0);
    for c in 0..img.channels {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
                let bottom = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
                out.set(c, oy, ox, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

/// Per-channel normalization constants applied to `pixel / 255`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [0.5; 3], std: [0.5; 3] }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("normalization std must be positive, got {:?}", self.std)));
        }
        Ok(())
    }
}

/// `(pixel / 255 - mean) / std` per channel.
pub fn normalize<T: Real>(img: &Image, norm: &Normalization) -> Result<Tensor<T>> {
    norm.validate()?;
    if img.channels != 3 {
        return Err(dim_err!("normalize expects 3 channels, got {}", img.channels));
    }
    let plane = img.height * img.width;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            T::of(((v as f64 / 255.0) - norm.mean[c] as f64) / norm.std[c] as f64)
        })
        .collect();
    Tensor::new(vec![3, img.height, img.width], data)
}

/// Inverse of [`normalize`], back to the 0..255 scale.
pub fn denormalize<T: Real>(t: &Tensor<T>, norm: &Normalization) -> Result<Image> {
    norm.validate()?;
    let &[c, h, w] = t.shape() else {
        return Err(dim_err!("denormalize expects [3,H,W], got {:?}", t.shape()));
    };
    if c != 3 {
        return Err(dim_err!("denormalize expects 3 channels, got {c}"));
    }
    let plane = h * w;
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / plane;
            ((v.as_f64() * norm.std[ch] as f64 + norm.mean[ch] as f64) * 255.0) as f32
        })
        .collect();
    Image::new(3, h, w, data)
}
