//! Training-time augmentation: horizontal flip, color jitter, grayscale,
//! then a resize to the training resolution. Operates on [-1, 1] tensors.

use crate::imageio::resize_bilinear;
use crate::real::Real;
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub p_jitter: f64,
    pub p_gray: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip: 0.5,
            p_jitter: 0.8,
            p_gray: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            p_flip: 0.0,
            p_jitter: 0.0,
            p_gray: 0.0,
        }
    }
}

/// Jitter factor ranges (brightness/contrast/saturation multiplicative,
/// hue in turns).
const JITTER_LO: f64 = 0.8;
const JITTER_HI: f64 = 1.2;
const HUE_MAX: f64 = 0.05;

/// Apply the configured augmentations, then resize to `input_side`.
pub fn augment<T: Real, R: Rng + ?Sized>(
    image: &Array3<T>,
    cfg: &AugmentConfig,
    input_side: usize,
    rng: &mut R,
) -> Array3<T> {
    let mut img = image.clone();
    if rng.gen_bool(cfg.p_flip) {
        img = flip_horizontal(&img);
    }
    if rng.gen_bool(cfg.p_jitter) {
        let b = rng.gen_range(JITTER_LO..JITTER_HI);
        let c = rng.gen_range(JITTER_LO..JITTER_HI);
        let s = rng.gen_range(JITTER_LO..JITTER_HI);
        let hue = rng.gen_range(-HUE_MAX..HUE_MAX);
        img = color_jitter(&img, b, c, s, hue);
    }
    if rng.gen_bool(cfg.p_gray) {
        img = grayscale(&img);
    }
    let one = T::one();
    img.mapv_inplace(|v| v.max(-one).min(one));
    resize_bilinear(&img, input_side)
}

/// Mirror along the width axis.
pub fn flip_horizontal<T: Real>(image: &Array3<T>) -> Array3<T> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch, y, x)] = image[(ch, y, w - 1 - x)];
            }
        }
    }
    out
}

/// All channels replaced by the luma value.
pub fn grayscale<T: Real>(image: &Array3<T>) -> Array3<T> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let g = luma(image, y, x);
            for ch in 0..3 {
                out[(ch, y, x)] = g;
            }
        }
    }
    out
}

fn luma<T: Real>(image: &Array3<T>, y: usize, x: usize) -> T {
    T::from_f(0.299) * image[(0, y, x)]
        + T::from_f(0.587) * image[(1, y, x)]
        + T::from_f(0.114) * image[(2, y, x)]
}

/// Brightness, contrast, and saturation as multiplicative factors around
/// their reference points, hue as a rotation in turns. Works in [0, 1]
/// space internally.
pub fn color_jitter<T: Real>(
    image: &Array3<T>,
    brightness: f64,
    contrast: f64,
    sat: f64,
    hue_turns: f64,
) -> Array3<T> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    // Contrast pivots on the mean luma of the brightness-adjusted image.
    let mut mean = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let l = (luma(image, y, x).to_f() + 1.0) / 2.0;
            mean += (l * brightness).clamp(0.0, 1.0);
        }
    }
    mean /= (h * w) as f64;

    for y in 0..h {
        for x in 0..w {
            let mut rgb = [0.0f64; 3];
            for ch in 0..3 {
                let v01 = (image[(ch, y, x)].to_f() + 1.0) / 2.0;
                rgb[ch] = (v01 * brightness).clamp(0.0, 1.0);
            }
            // Contrast toward the mean.
            for v in rgb.iter_mut() {
                *v = (mean + contrast * (*v - mean)).clamp(0.0, 1.0);
            }
            // Saturation toward per-pixel gray.
            let gray = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
            for v in rgb.iter_mut() {
                *v = (gray + sat * (*v - gray)).clamp(0.0, 1.0);
            }
            if hue_turns != 0.0 {
                rgb = rotate_hue(rgb, hue_turns);
            }
            for ch in 0..3 {
                out[(ch, y, x)] = T::from_f(rgb[ch] * 2.0 - 1.0);
            }
        }
    }
    out
}

/// Rotate hue by `turns` of the color wheel via HSV.
pub fn rotate_hue(rgb: [f64; 3], turns: f64) -> [f64; 3] {
    let (h, s, v) = rgb_to_hsv(rgb);
    let h = (h + turns).rem_euclid(1.0);
    hsv_to_rgb(h, s, v)
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}
