//! Benchmark construction: mask geometry for the five subsets, prompt
//! assembly, a pluggable inpainting backend, and the desk-scale synthetic
//! dataset builder.
//!
//! The local synthetic backend is a test double, not a fidelity claim: it
//! blurs, hue-shifts, and noises the masked region so a detector has a
//! learnable real-vs-inpainted signal without any diffusion model. Real
//! diffusion inpainting is reached through the HTTP backend.

use crate::error::{Error, Result};
use crate::manifest::{self, ManifestRecord, Split};
use crate::perturb::gaussian_blur;
use crate::seeding;
use base64::Engine;
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// The 80-name category pool used for prompt substitution.
pub const DEFAULT_CATEGORY_POOL: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
    "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich",
    "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote",
    "keyboard", "cell phone", "microwave", "oven", "toaster", "sink", "refrigerator", "book",
    "clock", "vase", "scissors", "teddy bear", "hair drier", "toothbrush",
];

/// Environment variables naming the remote backend endpoint.
pub const REMOTE_URL_ENV: &str = "END4_BACKEND_URL";
pub const REMOTE_TOKEN_ENV: &str = "END4_BACKEND_TOKEN";

/// Mask-placement rule.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskSubset {
    #[serde(rename = "center128")]
    Center128,
    #[serde(rename = "random128")]
    Random128,
    #[serde(rename = "centerRandom")]
    CenterRandom,
    #[serde(rename = "randomRandom")]
    RandomRandom,
    #[serde(rename = "cocoMask")]
    CocoMask,
}

impl MaskSubset {
    pub const ALL: [MaskSubset; 5] = [
        MaskSubset::Center128,
        MaskSubset::Random128,
        MaskSubset::CenterRandom,
        MaskSubset::RandomRandom,
        MaskSubset::CocoMask,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskSubset::Center128 => "center128",
            MaskSubset::Random128 => "random128",
            MaskSubset::CenterRandom => "centerRandom",
            MaskSubset::RandomRandom => "randomRandom",
            MaskSubset::CocoMask => "cocoMask",
        }
    }
}

impl std::str::FromStr for MaskSubset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MaskSubset::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown mask subset '{s}'")))
    }
}

impl std::fmt::Display for MaskSubset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the inpainted region sits.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskRegion {
    Bbox {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    PolygonRef {
        annotation_id: String,
    },
}

/// Geometry parameters for mask generation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub subset: MaskSubset,
    pub image_side: usize,
    /// Side length used by the fixed-size subsets.
    pub fixed_side: usize,
    /// Candidate sides for the random-size subsets.
    pub size_pool: Vec<usize>,
}

impl MaskSpec {
    pub fn new(subset: MaskSubset) -> Self {
        MaskSpec {
            subset,
            image_side: 512,
            fixed_side: 128,
            size_pool: vec![16, 32, 64, 128, 256],
        }
    }

    /// Desk-scale geometry for small training images: sizes scale with the
    /// image so masked regions stay detectable.
    pub fn desk(subset: MaskSubset, image_side: usize) -> Self {
        MaskSpec {
            subset,
            image_side,
            fixed_side: (image_side / 4).max(8),
            size_pool: vec![
                (image_side / 8).max(4),
                (image_side / 4).max(8),
                (image_side / 2).max(16),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 {
            return Err(Error::InvalidParameter("image side must be positive".into()));
        }
        match self.subset {
            MaskSubset::Center128 | MaskSubset::Random128 => {
                if self.fixed_side > self.image_side || self.fixed_side == 0 {
                    return Err(Error::InvalidParameter(format!(
                        "fixed mask side {} does not fit a {} image",
                        self.fixed_side, self.image_side
                    )));
                }
            }
            MaskSubset::CenterRandom | MaskSubset::RandomRandom => {
                if self.size_pool.is_empty() {
                    return Err(Error::InvalidParameter("size pool is empty".into()));
                }
                if let Some(bad) = self
                    .size_pool
                    .iter()
                    .find(|s| **s > self.image_side || **s == 0)
                {
                    return Err(Error::InvalidParameter(format!(
                        "size pool entry {bad} does not fit a {} image",
                        self.image_side
                    )));
                }
            }
            MaskSubset::CocoMask => {}
        }
        Ok(())
    }
}

/// Polygon annotations for one image.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub id: String,
    pub category: String,
    /// Closed polygon in pixel coordinates.
    pub polygon: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ImageAnnotations {
    pub id: String,
    pub annotations: Vec<Annotation>,
}

impl ImageAnnotations {
    /// Distinct categories present on this image, in first-seen order.
    pub fn categories(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for a in &self.annotations {
            if !seen.contains(&a.category) {
                seen.push(a.category.clone());
            }
        }
        seen
    }

    pub fn find(&self, annotation_id: &str) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.id == annotation_id)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub categories: Vec<String>,
    pub images: Vec<ImageAnnotations>,
}

impl AnnotationFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let data = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Data(format!("cannot read annotations: {e}")))?;
        Ok(serde_json::from_str(&data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn image(&self, id: &str) -> Option<&ImageAnnotations> {
        self.images.iter().find(|i| i.id == id)
    }
}

/// Draw a mask region for the given subset.
pub fn gen_mask<R: Rng + ?Sized>(
    spec: &MaskSpec,
    rng: &mut R,
    annotations: Option<&ImageAnnotations>,
) -> Result<MaskRegion> {
    spec.validate()?;
    let side = spec.image_side;
    let bbox = |top: usize, left: usize, s: usize| MaskRegion::Bbox {
        top,
        left,
        height: s,
        width: s,
    };
    Ok(match spec.subset {
        MaskSubset::Center128 => {
            let s = spec.fixed_side;
            bbox((side - s) / 2, (side - s) / 2, s)
        }
        MaskSubset::Random128 => {
            let s = spec.fixed_side;
            bbox(
                rng.gen_range(0..=side - s),
                rng.gen_range(0..=side - s),
                s,
            )
        }
        MaskSubset::CenterRandom => {
            let s = *spec.size_pool.choose(rng).expect("validated non-empty");
            bbox((side - s) / 2, (side - s) / 2, s)
        }
        MaskSubset::RandomRandom => {
            let s = *spec.size_pool.choose(rng).expect("validated non-empty");
            bbox(
                rng.gen_range(0..=side - s),
                rng.gen_range(0..=side - s),
                s,
            )
        }
        MaskSubset::CocoMask => {
            let ann = annotations.ok_or_else(|| {
                Error::Data("cocoMask requires segmentation annotations".into())
            })?;
            let choice = ann
                .annotations
                .choose(rng)
                .ok_or_else(|| Error::Data(format!("image {} has no annotations", ann.id)))?;
            MaskRegion::PolygonRef {
                annotation_id: choice.id.clone(),
            }
        }
    })
}

/// Prompt for one sample: the fixed caption for geometric subsets; for the
/// segmentation subset, min(n, m) replacement categories drawn from the
/// pool excluding the image's own n categories, comma-joined.
pub fn build_prompt<R: Rng + ?Sized>(
    subset: MaskSubset,
    image_categories: &[String],
    rng: &mut R,
    category_pool: &[String],
    m: usize,
) -> Result<String> {
    if subset != MaskSubset::CocoMask {
        return Ok("a photo".to_string());
    }
    let n = image_categories.len();
    if n == 0 {
        return Err(Error::Data(
            "cocoMask prompt needs at least one image category".into(),
        ));
    }
    let take = n.min(m);
    let mut candidates: Vec<&String> = category_pool
        .iter()
        .filter(|c| !image_categories.contains(c))
        .collect();
    if candidates.len() < take {
        return Err(Error::Data(format!(
            "category pool has only {} candidates outside the image's own, {take} needed",
            candidates.len()
        )));
    }
    candidates.shuffle(rng);
    let picked: Vec<&str> = candidates[..take].iter().map(|s| s.as_str()).collect();
    Ok(picked.join(", "))
}

/// Render a region to a binary mask image (255 inside, 0 outside).
pub fn rasterize_region(
    region: &MaskRegion,
    annotations: Option<&ImageAnnotations>,
    side: usize,
) -> Result<GrayImage> {
    match region {
        MaskRegion::Bbox {
            top,
            left,
            height,
            width,
        } => {
            if top + height > side || left + width > side {
                return Err(Error::InvalidParameter(format!(
                    "bbox ({top},{left},{height},{width}) exceeds a {side} image"
                )));
            }
            let mut mask = GrayImage::new(side as u32, side as u32);
            for y in *top..top + height {
                for x in *left..left + width {
                    mask.put_pixel(x as u32, y as u32, image::Luma([255]));
                }
            }
            Ok(mask)
        }
        MaskRegion::PolygonRef { annotation_id } => {
            let ann = annotations
                .ok_or_else(|| Error::Data("polygon mask needs annotations".into()))?;
            let poly = ann.find(annotation_id).ok_or_else(|| {
                Error::Data(format!("annotation {annotation_id} not found for image {}", ann.id))
            })?;
            Ok(polygon_fill(&poly.polygon, side))
        }
    }
}

/// Even-odd scanline fill of a closed polygon.
pub fn polygon_fill(polygon: &[[f64; 2]], side: usize) -> GrayImage {
    let mut mask = GrayImage::new(side as u32, side as u32);
    if polygon.len() < 3 {
        return mask;
    }
    for y in 0..side {
        let yc = y as f64 + 0.5;
        let mut crossings = Vec::new();
        for i in 0..polygon.len() {
            let [x0, y0] = polygon[i];
            let [x1, y1] = polygon[(i + 1) % polygon.len()];
            if (y0 <= yc && y1 > yc) || (y1 <= yc && y0 > yc) {
                crossings.push(x0 + (yc - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in crossings.chunks(2) {
            if let &[a, b] = pair {
                let x0 = a.max(0.0) as usize;
                let x1 = (b.min(side as f64)).ceil() as usize;
                for x in x0..x1.min(side) {
                    if (x as f64 + 0.5) >= a && (x as f64 + 0.5) < b {
                        mask.put_pixel(x as u32, y as u32, image::Luma([255]));
                    }
                }
            }
        }
    }
    mask
}

/// Anything that can replace the masked region of an image.
pub trait InpaintingBackend: Sync {
    fn name(&self) -> &str;
    fn inpaint(
        &self,
        image: &RgbImage,
        mask: &GrayImage,
        prompt: &str,
        seed: u64,
    ) -> Result<RgbImage>;
}

/// Desk-scale test double: blur + hue shift + noise inside the mask,
/// pixels outside the mask copied through untouched.
#[derive(Clone, Copy, Debug)]
pub struct LocalSyntheticBackend {
    pub blur_sigma: f64,
    /// Noise std in the [-1, 1] pixel scale.
    pub noise_std: f64,
    /// Hue rotation in turns of the color wheel.
    pub hue_shift_turns: f64,
}

impl Default for LocalSyntheticBackend {
    fn default() -> Self {
        LocalSyntheticBackend {
            blur_sigma: 2.0,
            noise_std: 0.05,
            hue_shift_turns: 0.05,
        }
    }
}

impl InpaintingBackend for LocalSyntheticBackend {
    fn name(&self) -> &str {
        "local-synthetic"
    }

    fn inpaint(
        &self,
        image: &RgbImage,
        mask: &GrayImage,
        prompt: &str,
        seed: u64,
    ) -> Result<RgbImage> {
        if image.dimensions() != mask.dimensions() {
            return Err(Error::ShapeMismatch(
                "mask and image dimensions differ".into(),
            ));
        }
        let _ = prompt; // The double has no semantics to condition on.
        let blurred = gaussian_blur(image, self.blur_sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = image.clone();
        // u8 std for noise specified on the [-1, 1] scale.
        let noise_u8 = self.noise_std * 127.5;
        for (x, y, m) in mask.enumerate_pixels() {
            if m.0[0] == 0 {
                continue;
            }
            let px = blurred.get_pixel(x, y);
            let rgb01 = [
                px.0[0] as f64 / 255.0,
                px.0[1] as f64 / 255.0,
                px.0[2] as f64 / 255.0,
            ];
            let shifted = crate::augment::rotate_hue(rgb01, self.hue_shift_turns);
            let mut vals = [0u8; 3];
            for c in 0..3 {
                let noisy = shifted[c] * 255.0 + rng.sample::<f64, _>(rand_distr::StandardNormal) * noise_u8;
                vals[c] = noisy.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x, y, image::Rgb(vals));
        }
        Ok(out)
    }
}

/// HTTP inpainting backend configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RemoteBackendConfig {
    pub url: String,
    #[serde(default)]
    pub auth_token: Option<String>,
    pub steps: u32,
    pub retries: u32,
    pub timeout_secs: u64,
    pub backoff_ms: u64,
}

impl Default for RemoteBackendConfig {
    fn default() -> Self {
        RemoteBackendConfig {
            url: String::new(),
            auth_token: None,
            steps: 20,
            retries: 3,
            timeout_secs: 60,
            backoff_ms: 250,
        }
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    image_b64: String,
    mask_b64: String,
    prompt: &'a str,
    steps: u32,
    seed: u64,
}

#[derive(Deserialize)]
struct RemoteResponse {
    image_b64: String,
}

/// Diffusion inpainting over HTTP with bounded retries and exponential
/// backoff. Payloads are base64 PNG.
pub struct RemoteBackend {
    config: RemoteBackendConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteBackendConfig) -> Result<Self> {
        if config.url.is_empty() {
            return Err(Error::Config(format!(
                "remote backend URL missing; set it in the config or via ${REMOTE_URL_ENV}"
            )));
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(std::time::Duration::from_secs(config.timeout_secs))
            .build();
        Ok(RemoteBackend { config, agent })
    }

    /// Build from environment variables.
    pub fn from_env(mut config: RemoteBackendConfig) -> Result<Self> {
        if let Ok(url) = std::env::var(REMOTE_URL_ENV) {
            config.url = url;
        }
        if let Ok(token) = std::env::var(REMOTE_TOKEN_ENV) {
            config.auth_token = Some(token);
        }
        Self::new(config)
    }

    fn call_once(&self, body: &str) -> std::result::Result<String, RemoteCallError> {
        let mut req = self
            .agent
            .post(&self.config.url)
            .set("Content-Type", "application/json");
        if let Some(token) = &self.config.auth_token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        match req.send_string(body) {
            Ok(resp) => resp
                .into_string()
                .map_err(|e| RemoteCallError::Retryable(format!("read body: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                if (500..600).contains(&code) {
                    Err(RemoteCallError::Retryable(format!("HTTP {code}: {text}")))
                } else {
                    Err(RemoteCallError::Fatal(format!("HTTP {code}: {text}")))
                }
            }
            Err(ureq::Error::Transport(t)) => {
                Err(RemoteCallError::Retryable(format!("transport: {t}")))
            }
        }
    }
}

enum RemoteCallError {
    Retryable(String),
    Fatal(String),
}

impl InpaintingBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote-http"
    }

    fn inpaint(
        &self,
        image: &RgbImage,
        mask: &GrayImage,
        prompt: &str,
        seed: u64,
    ) -> Result<RgbImage> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let request = RemoteRequest {
            image_b64: b64.encode(encode_png_rgb(image)?),
            mask_b64: b64.encode(encode_png_gray(mask)?),
            prompt,
            steps: self.config.steps,
            seed,
        };
        let body = serde_json::to_string(&request)?;

        let mut last_err = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(
                    self.config.backoff_ms << (attempt - 1),
                ));
            }
            match self.call_once(&body) {
                Ok(text) => {
                    let parsed: RemoteResponse = serde_json::from_str(&text).map_err(|e| {
                        Error::Protocol(format!("malformed backend response: {e}"))
                    })?;
                    let bytes = b64.decode(parsed.image_b64.as_bytes()).map_err(|e| {
                        Error::Protocol(format!("backend image is not valid base64: {e}"))
                    })?;
                    let img = image::load_from_memory(&bytes).map_err(|e| {
                        Error::Protocol(format!("backend image does not decode: {e}"))
                    })?;
                    return Ok(img.to_rgb8());
                }
                Err(RemoteCallError::Fatal(msg)) => return Err(Error::Protocol(msg)),
                Err(RemoteCallError::Retryable(msg)) => last_err = msg,
            }
        }
        Err(Error::Transport(format!(
            "backend failed after {} attempts: {last_err}",
            self.config.retries + 1
        )))
    }
}

fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Replace the masked region of `image` through a backend.
pub fn synthesize(
    backend: &dyn InpaintingBackend,
    image: &RgbImage,
    region: &MaskRegion,
    annotations: Option<&ImageAnnotations>,
    prompt: &str,
    seed: u64,
) -> Result<RgbImage> {
    let side = image.width() as usize;
    if image.width() != image.height() {
        return Err(Error::ShapeMismatch("synthesis expects square images".into()));
    }
    let mask = rasterize_region(region, annotations, side)?;
    backend.inpaint(image, &mask, prompt, seed)
}

/// Procedural stand-in for a natural photo: gradient background, a few
/// soft shapes, mild sensor-like noise.
pub fn synthetic_nature_image<R: Rng + ?Sized>(rng: &mut R, side: u32) -> RgbImage {
    let mut img = RgbImage::new(side, side);
    let c0: [f64; 3] = [
        rng.gen_range(20.0..235.0),
        rng.gen_range(20.0..235.0),
        rng.gen_range(20.0..235.0),
    ];
    let c1: [f64; 3] = [
        rng.gen_range(20.0..235.0),
        rng.gen_range(20.0..235.0),
        rng.gen_range(20.0..235.0),
    ];
    let horizontal = rng.gen_bool(0.5);
    for y in 0..side {
        for x in 0..side {
            let t = if horizontal {
                x as f64 / (side - 1) as f64
            } else {
                y as f64 / (side - 1) as f64
            };
            let px = [
                (c0[0] + t * (c1[0] - c0[0])) as u8,
                (c0[1] + t * (c1[1] - c0[1])) as u8,
                (c0[2] + t * (c1[2] - c0[2])) as u8,
            ];
            img.put_pixel(x, y, image::Rgb(px));
        }
    }
    let shapes = rng.gen_range(3..8);
    for _ in 0..shapes {
        let cx = rng.gen_range(0..side) as i64;
        let cy = rng.gen_range(0..side) as i64;
        let rx = rng.gen_range((side / 12).max(2)..side / 3) as i64;
        let ry = rng.gen_range((side / 12).max(2)..side / 3) as i64;
        let col: [f64; 3] = [
            rng.gen_range(0.0..255.0),
            rng.gen_range(0.0..255.0),
            rng.gen_range(0.0..255.0),
        ];
        let alpha = rng.gen_range(0.55..1.0);
        for y in (cy - ry).max(0)..(cy + ry + 1).min(side as i64) {
            for x in (cx - rx).max(0)..(cx + rx + 1).min(side as i64) {
                let dx = (x - cx) as f64 / rx as f64;
                let dy = (y - cy) as f64 / ry as f64;
                if dx * dx + dy * dy <= 1.0 {
                    let px = img.get_pixel_mut(x as u32, y as u32);
                    for c in 0..3 {
                        px.0[c] =
                            ((1.0 - alpha) * px.0[c] as f64 + alpha * col[c]).round() as u8;
                    }
                }
            }
        }
    }
    // Mild sensor noise.
    for px in img.pixels_mut() {
        for c in 0..3 {
            let n: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * 2.0;
            px.0[c] = (px.0[c] as f64 + n).round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Random blob annotations for the desk-scale cocoMask subset.
pub fn synthetic_annotations<R: Rng + ?Sized>(
    rng: &mut R,
    image_ids: &[String],
    side: usize,
    pool: &[String],
) -> AnnotationFile {
    let mut images = Vec::with_capacity(image_ids.len());
    for id in image_ids {
        let count = rng.gen_range(1..=3);
        let mut annotations = Vec::with_capacity(count);
        let mut cats: Vec<&String> = pool.iter().collect();
        cats.shuffle(rng);
        for (k, cat) in cats.into_iter().take(count).enumerate() {
            let r_base = rng.gen_range(side as f64 / 8.0..side as f64 / 4.0);
            let cx = rng.gen_range(r_base..side as f64 - r_base);
            let cy = rng.gen_range(r_base..side as f64 - r_base);
            let verts = rng.gen_range(8..13);
            let polygon: Vec<[f64; 2]> = (0..verts)
                .map(|v| {
                    let angle = v as f64 / verts as f64 * std::f64::consts::TAU;
                    let r = r_base * rng.gen_range(0.7..1.3);
                    [cx + r * angle.cos(), cy + r * angle.sin()]
                })
                .collect();
            annotations.push(Annotation {
                id: format!("{id}-a{k}"),
                category: cat.clone(),
                polygon,
            });
        }
        images.push(ImageAnnotations {
            id: id.clone(),
            annotations,
        });
    }
    AnnotationFile {
        categories: pool.to_vec(),
        images,
    }
}

/// Parameters of the desk-scale synthetic benchmark.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SanitySpec {
    pub n_train: usize,
    pub n_test: usize,
    pub side: usize,
    pub seed: u64,
}

impl SanitySpec {
    pub fn new(n_train: usize, n_test: usize, seed: u64) -> Self {
        SanitySpec {
            n_train,
            n_test,
            side: 64,
            seed,
        }
    }
}

/// Paths of a generated dataset.
pub struct SanityDataset {
    pub root: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub annotations: PathBuf,
}

/// Build the balanced synthetic benchmark: half real, half inpainted by the
/// local backend, fakes spread evenly over the five mask subsets.
pub fn build_sanity_dataset(dir: impl AsRef<Path>, spec: &SanitySpec) -> Result<SanityDataset> {
    let root = dir.as_ref().to_path_buf();
    let images_dir = root.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let pool: Vec<String> = DEFAULT_CATEGORY_POOL.iter().map(|s| s.to_string()).collect();
    let backend = LocalSyntheticBackend::default();

    let mut annotation_images = Vec::new();
    let mut write_split = |split: Split, n: usize| -> Result<Vec<ManifestRecord>> {
        let split_tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            let subset = MaskSubset::ALL[(i / 2) % MaskSubset::ALL.len()];
            let id = format!("{split_tag}_{i:05}");
            let item_seed = seeding::derive_seed(spec.seed, "sanity", split_tag.len() as u64, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
            let nature = synthetic_nature_image(&mut rng, spec.side as u32);
            let rel_path = format!("images/{id}.png");
            let (mask, prompt) = if label == 1 {
                let ann_file = synthetic_annotations(
                    &mut rng,
                    std::slice::from_ref(&id),
                    spec.side,
                    &pool,
                );
                let image_ann = ann_file.images.into_iter().next().unwrap();
                let mask_spec = MaskSpec::desk(subset, spec.side);
                let region = gen_mask(&mask_spec, &mut rng, Some(&image_ann))?;
                let prompt = build_prompt(
                    subset,
                    &image_ann.categories(),
                    &mut rng,
                    &pool,
                    5,
                )?;
                let fake = synthesize(
                    &backend,
                    &nature,
                    &region,
                    Some(&image_ann),
                    &prompt,
                    item_seed,
                )?;
                crate::imageio::save_png(root.join(&rel_path), &fake)?;
                annotation_images.push(image_ann);
                (Some(region), Some(prompt))
            } else {
                crate::imageio::save_png(root.join(&rel_path), &nature)?;
                (None, None)
            };
            records.push(ManifestRecord {
                id,
                image_path: rel_path,
                label,
                subset,
                mask,
                prompt,
                generator: backend.name().to_string(),
                seed: item_seed,
                split,
            });
        }
        Ok(records)
    };

    let train_records = write_split(Split::Train, spec.n_train)?;
    let test_records = write_split(Split::Test, spec.n_test)?;

    let train_manifest = root.join("train.jsonl");
    let test_manifest = root.join("test.jsonl");
    manifest::write_manifest(&train_manifest, &train_records)?;
    manifest::write_manifest(&test_manifest, &test_records)?;

    let annotations = root.join("annotations.json");
    AnnotationFile {
        categories: pool,
        images: annotation_images,
    }
    .save(&annotations)?;

    Ok(SanityDataset {
        root,
        train_manifest,
        test_manifest,
        annotations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn center_mask_on_512_sits_at_192() {
        let spec = MaskSpec::new(MaskSubset::Center128);
        let m = gen_mask(&spec, &mut rng(1), None).unwrap();
        assert_eq!(
            m,
            MaskRegion::Bbox {
                top: 192,
                left: 192,
                height: 128,
                width: 128
            }
        );
    }

    #[test]
    fn random_fixed_masks_stay_contained() {
        let spec = MaskSpec::new(MaskSubset::Random128);
        let mut r = rng(2);
        for _ in 0..2000 {
            match gen_mask(&spec, &mut r, None).unwrap() {
                MaskRegion::Bbox {
                    top,
                    left,
                    height,
                    width,
                } => {
                    assert_eq!((height, width), (128, 128));
                    assert!(top <= 384 && left <= 384);
                }
                other => panic!("unexpected region {other:?}"),
            }
        }
    }

    #[test]
    fn center_random_sizes_are_uniform_over_the_pool() {
        // Chi-square against uniform over 5 sizes; 4 dof, p > 0.01 means
        // statistic < 13.277.
        let spec = MaskSpec::new(MaskSubset::CenterRandom);
        let mut r = rng(3);
        let mut counts = std::collections::HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            if let MaskRegion::Bbox { height, .. } = gen_mask(&spec, &mut r, None).unwrap() {
                *counts.entry(height).or_insert(0usize) += 1;
            }
        }
        assert_eq!(counts.len(), 5);
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts
            .values()
            .map(|c| (*c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 13.277, "chi-square {chi2}");
    }

    #[test]
    fn oversized_pools_and_missing_annotations_error() {
        let mut spec = MaskSpec::new(MaskSubset::RandomRandom);
        spec.image_side = 64;
        assert!(matches!(
            gen_mask(&spec, &mut rng(4), None),
            Err(Error::InvalidParameter(_))
        ));
        let spec = MaskSpec::new(MaskSubset::CocoMask);
        assert!(matches!(
            gen_mask(&spec, &mut rng(5), None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn geometric_prompts_are_the_fixed_caption() {
        for subset in [
            MaskSubset::Center128,
            MaskSubset::Random128,
            MaskSubset::CenterRandom,
            MaskSubset::RandomRandom,
        ] {
            let p = build_prompt(subset, &[], &mut rng(6), &[], 5).unwrap();
            assert_eq!(p, "a photo");
        }
    }

    #[test]
    fn coco_prompts_exclude_own_categories_and_count_min_n_m() {
        let pool: Vec<String> = DEFAULT_CATEGORY_POOL.iter().map(|s| s.to_string()).collect();
        let mut r = rng(7);
        // Seven own categories: prompt must contain exactly five others.
        let own: Vec<String> = pool[..7].to_vec();
        for _ in 0..50 {
            let p = build_prompt(MaskSubset::CocoMask, &own, &mut r, &pool, 5).unwrap();
            let parts: Vec<&str> = p.split(", ").collect();
            assert_eq!(parts.len(), 5);
            for part in &parts {
                assert!(!own.iter().any(|o| o == part), "own category {part} leaked");
                assert!(pool.iter().any(|c| c == part));
            }
        }
        // Two own categories: exactly two replacements.
        let own: Vec<String> = pool[10..12].to_vec();
        for _ in 0..50 {
            let p = build_prompt(MaskSubset::CocoMask, &own, &mut r, &pool, 5).unwrap();
            let parts: Vec<&str> = p.split(", ").collect();
            assert_eq!(parts.len(), 2);
            for part in &parts {
                assert!(!own.iter().any(|o| o == part));
            }
        }
    }

    #[test]
    fn prompt_errors_on_empty_categories_or_tiny_pool() {
        let pool: Vec<String> = vec!["cat".into(), "dog".into()];
        assert!(matches!(
            build_prompt(MaskSubset::CocoMask, &[], &mut rng(8), &pool, 5),
            Err(Error::Data(_))
        ));
        let own = vec!["cat".into(), "dog".into()];
        assert!(matches!(
            build_prompt(MaskSubset::CocoMask, &own, &mut rng(9), &pool, 5),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn local_backend_preserves_outside_pixels_exactly_and_is_deterministic() {
        let mut r = rng(10);
        let img = synthetic_nature_image(&mut r, 64);
        let region = MaskRegion::Bbox {
            top: 16,
            left: 20,
            height: 24,
            width: 16,
        };
        let backend = LocalSyntheticBackend::default();
        let out1 = synthesize(&backend, &img, &region, None, "a photo", 42).unwrap();
        let out2 = synthesize(&backend, &img, &region, None, "a photo", 42).unwrap();
        assert_eq!(out1.as_raw(), out2.as_raw());
        let mut changed = 0;
        for y in 0..64u32 {
            for x in 0..64u32 {
                let inside = (16..40).contains(&y) && (20..36).contains(&x);
                let same = img.get_pixel(x, y) == out1.get_pixel(x, y);
                if inside {
                    changed += u32::from(!same);
                } else {
                    assert!(same, "pixel outside mask changed at ({x},{y})");
                }
            }
        }
        assert!(changed > 200, "mask interior barely changed: {changed}");
    }

    #[test]
    fn full_image_mask_keeps_output_in_valid_range_and_reworks_most_pixels() {
        let mut r = rng(11);
        let img = synthetic_nature_image(&mut r, 32);
        let region = MaskRegion::Bbox {
            top: 0,
            left: 0,
            height: 32,
            width: 32,
        };
        let backend = LocalSyntheticBackend::default();
        let out = synthesize(&backend, &img, &region, None, "a photo", 1).unwrap();
        let changed = img
            .pixels()
            .zip(out.pixels())
            .filter(|(a, b)| a != b)
            .count();
        assert!(changed > 32 * 32 / 2, "only {changed} pixels changed");
    }

    #[test]
    fn polygon_rasterization_covers_a_triangle() {
        let poly = vec![[2.0, 2.0], [14.0, 2.0], [2.0, 14.0]];
        let mask = polygon_fill(&poly, 16);
        assert_eq!(mask.get_pixel(3, 3).0[0], 255);
        assert_eq!(mask.get_pixel(15, 15).0[0], 0);
        let area: usize = mask.pixels().filter(|p| p.0[0] == 255).count();
        // Triangle area is 72; rasterization should land nearby.
        assert!((55..90).contains(&area), "area {area}");
    }

    #[test]
    fn desk_mask_spec_scales_down() {
        let spec = MaskSpec::desk(MaskSubset::CenterRandom, 64);
        assert_eq!(spec.fixed_side, 16);
        assert_eq!(spec.size_pool, vec![8, 16, 32]);
        spec.validate().unwrap();
    }

    #[test]
    fn sanity_dataset_is_balanced_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SanitySpec {
            n_train: 20,
            n_test: 10,
            side: 32,
            seed: 5,
        };
        let ds = build_sanity_dataset(dir.path().join("a"), &spec).unwrap();
        let train = manifest::read_manifest(&ds.train_manifest).unwrap();
        let test = manifest::read_manifest(&ds.test_manifest).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 10);
        assert_eq!(train.iter().filter(|r| r.label == 1).count(), 10);
        let subsets: std::collections::BTreeSet<_> =
            train.iter().map(|r| r.subset).collect();
        assert_eq!(subsets.len(), 5);
        for r in train.iter().chain(test.iter()) {
            assert_eq!(r.label == 1, r.mask.is_some());
            assert_eq!(r.label == 1, r.prompt.is_some());
            assert!(ds.root.join(&r.image_path).exists());
        }

        // Same spec, fresh directory: identical manifests byte for byte.
        let ds2 = build_sanity_dataset(dir.path().join("b"), &spec).unwrap();
        let a = std::fs::read(&ds.train_manifest).unwrap();
        let b = std::fs::read(&ds2.train_manifest).unwrap();
        assert_eq!(a, b);
    }
}
