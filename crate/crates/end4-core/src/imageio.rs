//! Image loading and the conversion between 8-bit RGB files and the
//! [-1, 1] channel-first tensors the networks consume.

use crate::error::{Error, Result};
use crate::real::Real;
use image::RgbImage;
use ndarray::Array3;
use std::path::Path;

/// A `[3, S, S]` image tensor clamped to [-1, 1] on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T: Real> {
    data: Array3<T>,
}

impl<T: Real> ImageTensor<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        let sh = data.shape();
        if sh[0] != 3 || sh[1] != sh[2] {
            return Err(Error::ShapeMismatch(format!(
                "image tensor must be [3, S, S], got {sh:?}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image tensor contains non-finite values".into()));
        }
        let one = T::one();
        Ok(ImageTensor {
            data: data.mapv(|v| v.max(-one).min(one)),
        })
    }

    pub fn side(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<T> {
        self.data
    }
}

/// 8-bit RGB to `[3, H, W]` in [-1, 1] (0 -> -1, 255 -> 1).
pub fn rgb_to_tensor<T: Real>(img: &RgbImage) -> Array3<T> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = T::from_f(px.0[c] as f64 / 127.5 - 1.0);
        }
    }
    out
}

/// `[3, H, W]` in [-1, 1] back to 8-bit RGB with clamping.
pub fn tensor_to_rgb<T: Real>(t: &Array3<T>) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                quantize(t[(0, y, x)].to_f()),
                quantize(t[(1, y, x)].to_f()),
                quantize(t[(2, y, x)].to_f()),
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img
}

fn quantize(v: f64) -> u8 {
    (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

pub fn save_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}

/// Bilinear resize of a `[3, H, W]` tensor to `side x side`. Sampling uses
/// half-pixel centers, so a same-size resize reproduces the input exactly.
pub fn resize_bilinear<T: Real>(src: &Array3<T>, side: usize) -> Array3<T> {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    if h == side && w == side {
        return src.clone();
    }
    let mut out = Array3::zeros((c, side, side));
    let sy = h as f64 / side as f64;
    let sx = w as f64 / side as f64;
    for oy in 0..side {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = T::from_f(fy - y0 as f64);
        for ox in 0..side {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = T::from_f(fx - x0 as f64);
            let one = T::one();
            for ch in 0..c {
                let top = src[(ch, y0, x0)] * (one - wx) + src[(ch, y0, x1)] * wx;
                let bot = src[(ch, y1, x0)] * (one - wx) + src[(ch, y1, x1)] * wx;
                out[(ch, oy, ox)] = top * (one - wy) + bot * wy;
            }
        }
    }
    out
}
