//! Test-time perturbations: JPEG recompression, Gaussian blur, saturation,
//! and contrast. All operate on 8-bit RGB before the detector's resize and
//! normalization, mirroring a post-processing pipeline in the wild.

use crate::error::{Error, Result};
use image::codecs::jpeg::JpegEncoder;
use image::RgbImage;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Jpeg,
    GaussianBlur,
    Saturation,
    Contrast,
}

impl PerturbKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbKind::Jpeg => "jpeg",
            PerturbKind::GaussianBlur => "gaussian_blur",
            PerturbKind::Saturation => "saturation",
            PerturbKind::Contrast => "contrast",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub kind: PerturbKind,
    pub level: f64,
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PerturbKind::Jpeg => {
                if self.level.fract() != 0.0 || !(1.0..=100.0).contains(&self.level) {
                    return Err(Error::InvalidParameter(format!(
                        "jpeg quality must be an integer in [1, 100], got {}",
                        self.level
                    )));
                }
            }
            PerturbKind::GaussianBlur | PerturbKind::Saturation | PerturbKind::Contrast => {
                if !(self.level >= 0.0 && self.level.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "{} level must be a finite value >= 0, got {}",
                        self.kind.as_str(),
                        self.level
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Apply one perturbation, returning a fresh image.
pub fn apply_perturbation(image: &RgbImage, p: &Perturbation) -> Result<RgbImage> {
    p.validate()?;
    Ok(match p.kind {
        PerturbKind::Jpeg => jpeg_cycle(image, p.level as u8)?,
        PerturbKind::GaussianBlur => gaussian_blur(image, p.level),
        PerturbKind::Saturation => saturation(image, p.level),
        PerturbKind::Contrast => contrast(image, p.level),
    })
}

/// Baseline JPEG encode/decode at quality `q`.
fn jpeg_cycle(image: &RgbImage, q: u8) -> Result<RgbImage> {
    let mut buf = Vec::new();
    let encoder = JpegEncoder::new_with_quality(&mut buf, q);
    image.write_with_encoder(encoder)?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?;
    Ok(decoded.to_rgb8())
}

/// Separable Gaussian with kernel radius ceil(3*sigma); sigma = 0 is the
/// exact identity. Borders clamp to the edge pixel.
pub fn gaussian_blur(image: &RgbImage, sigma: f64) -> RgbImage {
    if sigma == 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        kernel.push((-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for w in kernel.iter_mut() {
        *w /= norm;
    }

    let (w, h) = image.dimensions();
    let (wi, hi) = (w as i64, h as i64);
    // Horizontal pass into float planes, then vertical pass.
    let mut mid = vec![0.0f64; (w * h * 3) as usize];
    for y in 0..hi {
        for x in 0..wi {
            let mut acc = [0.0f64; 3];
            for (i, wk) in kernel.iter().enumerate() {
                let sx = (x + i as i64 - radius).clamp(0, wi - 1);
                let px = image.get_pixel(sx as u32, y as u32);
                for c in 0..3 {
                    acc[c] += wk * px.0[c] as f64;
                }
            }
            let base = ((y * wi + x) * 3) as usize;
            mid[base..base + 3].copy_from_slice(&acc);
        }
    }
    let mut out = RgbImage::new(w, h);
    for y in 0..hi {
        for x in 0..wi {
            let mut acc = [0.0f64; 3];
            for (i, wk) in kernel.iter().enumerate() {
                let sy = (y + i as i64 - radius).clamp(0, hi - 1);
                let base = ((sy * wi + x) * 3) as usize;
                for c in 0..3 {
                    acc[c] += wk * mid[base + c];
                }
            }
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_u8(acc[0]), to_u8(acc[1]), to_u8(acc[2])]),
            );
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn luma(px: &image::Rgb<u8>) -> f64 {
    0.299 * px.0[0] as f64 + 0.587 * px.0[1] as f64 + 0.114 * px.0[2] as f64
}

/// Interpolate each pixel between its grayscale value (s = 0) and the
/// original (s = 1); s > 1 extrapolates.
pub fn saturation(image: &RgbImage, s: f64) -> RgbImage {
    let mut out = image.clone();
    for px in out.pixels_mut() {
        let gray = luma(px);
        for c in 0..3 {
            px.0[c] = to_u8(gray + s * (px.0[c] as f64 - gray));
        }
    }
    out
}

/// Interpolate between the mean-luminance constant image (c = 0) and the
/// original (c = 1).
pub fn contrast(image: &RgbImage, c: f64) -> RgbImage {
    let n = (image.width() * image.height()) as f64;
    let mean: f64 = image.pixels().map(luma).sum::<f64>() / n;
    let mut out = image.clone();
    for px in out.pixels_mut() {
        for ch in 0..3 {
            px.0[ch] = to_u8(mean + c * (px.0[ch] as f64 - mean));
        }
    }
    out
}

/// Peak signal-to-noise ratio in dB between two same-size images;
/// identical images give infinity.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::ShapeMismatch("psnr inputs differ in size".into()));
    }
    let mse: f64 = a
        .pixels()
        .zip(b.pixels())
        .flat_map(|(pa, pb)| (0..3).map(move |c| (pa.0[c] as f64 - pb.0[c] as f64).powi(2)))
        .sum::<f64>()
        / (a.width() as f64 * a.height() as f64 * 3.0);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Smooth test image: gradients plus a few solid shapes, close in
    /// spirit to a natural photo's low-frequency content.
    pub(crate) fn natural_test_image(seed: u64, side: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c0, c1): ([f64; 3], [f64; 3]) = (
            [rng.gen_range(30.0..220.0), rng.gen_range(30.0..220.0), rng.gen_range(30.0..220.0)],
            [rng.gen_range(30.0..220.0), rng.gen_range(30.0..220.0), rng.gen_range(30.0..220.0)],
        );
        let mut img = RgbImage::new(side, side);
        for y in 0..side {
            for x in 0..side {
                let t = (x + y) as f64 / (2 * side - 2) as f64;
                let px = [
                    to_u8(c0[0] + t * (c1[0] - c0[0])),
                    to_u8(c0[1] + t * (c1[1] - c0[1])),
                    to_u8(c0[2] + t * (c1[2] - c0[2])),
                ];
                img.put_pixel(x, y, image::Rgb(px));
            }
        }
        for _ in 0..4 {
            let cx = rng.gen_range(0..side) as i64;
            let cy = rng.gen_range(0..side) as i64;
            let r = rng.gen_range((side / 10).max(2)..side / 3) as i64;
            let col = image::Rgb([rng.gen(), rng.gen(), rng.gen()]);
            for y in (cy - r).max(0)..(cy + r).min(side as i64) {
                for x in (cx - r).max(0)..(cx + r).min(side as i64) {
                    if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                        img.put_pixel(x as u32, y as u32, col);
                    }
                }
            }
        }
        img
    }

    #[test]
    fn identity_parameters_are_exact() {
        let img = natural_test_image(1, 48);
        for p in [
            Perturbation { kind: PerturbKind::GaussianBlur, level: 0.0 },
            Perturbation { kind: PerturbKind::Saturation, level: 1.0 },
            Perturbation { kind: PerturbKind::Contrast, level: 1.0 },
        ] {
            let out = apply_perturbation(&img, &p).unwrap();
            assert_eq!(img.as_raw(), out.as_raw(), "{:?} not identity", p.kind);
        }
    }

    #[test]
    fn zero_saturation_makes_channels_equal() {
        let img = natural_test_image(2, 32);
        let out = saturation(&img, 0.0);
        for px in out.pixels() {
            assert_eq!(px.0[0], px.0[1]);
            assert_eq!(px.0[1], px.0[2]);
        }
    }

    #[test]
    fn jpeg_q95_keeps_psnr_above_35db() {
        let img = natural_test_image(3, 64);
        let out = apply_perturbation(
            &img,
            &Perturbation { kind: PerturbKind::Jpeg, level: 95.0 },
        )
        .unwrap();
        let db = psnr(&img, &out).unwrap();
        assert!(db > 35.0, "psnr {db}");
    }

    #[test]
    fn jpeg_quality_is_monotone_in_psnr_on_fixed_image_set() {
        for seed in 0..10u64 {
            let img = natural_test_image(100 + seed, 48);
            let db = |q: f64| {
                let out = apply_perturbation(
                    &img,
                    &Perturbation { kind: PerturbKind::Jpeg, level: q },
                )
                .unwrap();
                psnr(&img, &out).unwrap()
            };
            let (d90, d50, d10) = (db(90.0), db(50.0), db(10.0));
            assert!(d90 >= d50 && d50 >= d10, "seed {seed}: {d90} {d50} {d10}");
        }
    }

    #[test]
    fn blur_smooths_a_noisy_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut img = RgbImage::new(32, 32);
        for px in img.pixels_mut() {
            *px = image::Rgb([rng.gen(), rng.gen(), rng.gen()]);
        }
        let out = gaussian_blur(&img, 2.0);
        // Neighboring pixel differences shrink under blur.
        let roughness = |im: &RgbImage| -> f64 {
            let mut acc = 0.0;
            for y in 0..31 {
                for x in 0..31 {
                    let a = im.get_pixel(x, y);
                    let b = im.get_pixel(x + 1, y);
                    acc += (a.0[0] as f64 - b.0[0] as f64).abs();
                }
            }
            acc
        };
        assert!(roughness(&out) < roughness(&img) / 3.0);
    }

    #[test]
    fn invalid_levels_are_rejected() {
        let img = natural_test_image(5, 16);
        for p in [
            Perturbation { kind: PerturbKind::Jpeg, level: 0.0 },
            Perturbation { kind: PerturbKind::Jpeg, level: 101.0 },
            Perturbation { kind: PerturbKind::Jpeg, level: 42.5 },
            Perturbation { kind: PerturbKind::GaussianBlur, level: -1.0 },
            Perturbation { kind: PerturbKind::Saturation, level: f64::NAN },
            Perturbation { kind: PerturbKind::Contrast, level: -0.1 },
        ] {
            assert!(apply_perturbation(&img, &p).is_err(), "{p:?}");
        }
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = natural_test_image(6, 16);
        assert!(psnr(&img, &img).unwrap().is_infinite());
    }
}
