//! Benign perturbations: JPEG round trip, Gaussian blur, bilinear downsampling.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::{reflect, Image};
use crate::rng::seeded;

/// Smallest side [`downsample`] may produce.
pub const MIN_SIDE: usize = 64;

pub const JPEG_QUALITY_RANGE: (u8, u8) = (90, 100);
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.0, 1.0);
pub const DOWNSAMPLE_RATIO_RANGE: (f64, f64) = (0.25, 1.0);
/// Chance that each operator is applied by [`random_augment`].
pub const APPLY_PROBABILITY: f64 = 0.5;

/// Baseline JPEG bytes at `quality` (1–100).
pub fn jpeg_encode(image: &Image, quality: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&quality) {
        return Err(invalid(format!("JPEG quality {quality} outside 1..=100")));
    }
    let rgb = image.to_rgb8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(
        rgb.as_raw(),
        image.width() as u32,
        image.height() as u32,
        ExtendedColorType::Rgb8,
    )?;
    Ok(buf)
}

/// Baseline JPEG encode and decode at `quality` (1–100).
pub fn jpeg_compress(image: &Image, quality: u8) -> Result<Image> {
    let decoded = image::load(Cursor::new(jpeg_encode(image, quality)?), ImageFormat::Jpeg)?;
    Ok(Image::from_dynamic(&decoded))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with radius `⌈3σ⌉` and mirrored borders; `σ = 0` is the identity.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("blur sigma {sigma} must be finite and >= 0")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (image.height(), image.width());
    let src = image.data();
    let mut tmp = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - r, w);
                    acc += kv * f64::from(src[(y * w + xx) * 3 + c]);
                }
                tmp[(y * w + x) * 3 + c] = acc as f32;
            }
        }
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - r, h);
                    acc += kv * f64::from(tmp[(yy * w + x) * 3 + c]);
                }
                out[(y * w + x) * 3 + c] = acc as f32;
            }
        }
    }
    let mut img = Image::new(h, w, out)?;
    img.clamp01();
    Ok(img)
}

/// Bilinear resampling to `⌊ratio·H⌋ × ⌊ratio·W⌋` with pixel-centre alignment.
pub fn downsample(image: &Image, ratio: f64) -> Result<Image> {
    downsample_with_floor(image, ratio, MIN_SIDE)
}

/// [`downsample`] with a caller-chosen minimum output side.
pub fn downsample_with_floor(image: &Image, ratio: f64, min_side: usize) -> Result<Image> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(invalid(format!("downsampling ratio {ratio} outside (0, 1]")));
    }
    if ratio == 1.0 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height(), image.width());
    let (nh, nw) = ((ratio * h as f64).floor() as usize, (ratio * w as f64).floor() as usize);
    if nh < min_side || nw < min_side {
        return Err(invalid(format!(
            "downsampling {h}x{w} by {ratio} gives {nh}x{nw}, below {min_side}"
        )));
    }
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let axis = |dst: usize, scale: f64, n: usize| {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    let src = image.data();
    let mut out = Vec::with_capacity(nh * nw * 3);
    for y in 0..nh {
        let (y0, y1, fy) = axis(y, sy, h);
        for x in 0..nw {
            let (x0, x1, fx) = axis(x, sx, w);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| f64::from(src[(yy * w + xx) * 3 + c]);
                let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
                let bottom = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
                out.push((top + fy * (bottom - top)) as f32);
            }
        }
    }
    Image::new(nh, nw, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbOp {
    Jpeg,
    Blur,
    #[serde(alias = "down")]
    Downsample,
}

impl PerturbOp {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "jpeg" => Some(Self::Jpeg),
            "blur" => Some(Self::Blur),
            "down" | "downsample" => Some(Self::Downsample),
            _ => None,
        }
    }
}

/// One operator with its parameter: quality, σ, or ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub op: PerturbOp,
    pub param: f64,
}

impl PerturbationSpec {
    pub fn new(op: PerturbOp, param: f64) -> Result<Self> {
        let ok = match op {
            PerturbOp::Jpeg => param.fract() == 0.0 && (1.0..=100.0).contains(&param),
            PerturbOp::Blur => param >= 0.0 && param.is_finite(),
            PerturbOp::Downsample => param > 0.0 && param <= 1.0,
        };
        if !ok {
            return Err(invalid(format!("invalid parameter {param} for {op:?}")));
        }
        Ok(Self { op, param })
    }

    /// Short label used in reports: `jpeg95`, `blur1`, `down0.5`.
    pub fn label(&self) -> String {
        match self.op {
            PerturbOp::Jpeg => format!("jpeg{}", self.param),
            PerturbOp::Blur => format!("blur{}", self.param),
            PerturbOp::Downsample => format!("down{}", self.param),
        }
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        self.apply_with_floor(image, MIN_SIDE)
    }

    /// [`apply`](Self::apply) with a caller-chosen minimum side for downsampling.
    pub fn apply_with_floor(&self, image: &Image, min_side: usize) -> Result<Image> {
        match self.op {
            PerturbOp::Jpeg => jpeg_compress(image, self.param as u8),
            PerturbOp::Blur => gaussian_blur(image, self.param),
            PerturbOp::Downsample => downsample_with_floor(image, self.param, min_side),
        }
    }
}

/// The evaluation grid: JPEG 95, blur σ=1, downsampling by 2.
pub fn robustness_suite() -> Vec<PerturbationSpec> {
    vec![
        PerturbationSpec { op: PerturbOp::Jpeg, param: 95.0 },
        PerturbationSpec { op: PerturbOp::Blur, param: 1.0 },
        PerturbationSpec { op: PerturbOp::Downsample, param: 0.5 },
    ]
}

/// Parameters drawn for one augmentation; every value is sampled even when
/// its operator is switched off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub jpeg_quality: u8,
    pub ratio: f64,
    pub sigma: f64,
    pub apply_jpeg: bool,
    pub apply_downsample: bool,
    pub apply_blur: bool,
}

pub fn sample_plan(seed: u64) -> AugmentPlan {
    let mut rng = seeded(seed);
    let jpeg_quality = rng.random_range(JPEG_QUALITY_RANGE.0..=JPEG_QUALITY_RANGE.1);
    let ratio = rng.random_range(DOWNSAMPLE_RATIO_RANGE.0..=DOWNSAMPLE_RATIO_RANGE.1);
    let sigma = rng.random_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1);
    AugmentPlan {
        jpeg_quality,
        ratio,
        sigma,
        apply_jpeg: rng.random_bool(APPLY_PROBABILITY),
        apply_downsample: rng.random_bool(APPLY_PROBABILITY),
        apply_blur: rng.random_bool(APPLY_PROBABILITY),
    }
}

/// Seeded augmentation in the order JPEG → downsample → blur. The ratio is
/// raised as needed so both sides stay at least `min_side`.
pub fn random_augment_with_floor(image: &Image, seed: u64, min_side: usize) -> Result<Image> {
    let plan = sample_plan(seed);
    let mut img = if plan.apply_jpeg {
        jpeg_compress(image, plan.jpeg_quality)?
    } else {
        image.clone()
    };
    if plan.apply_downsample {
        let short = img.height().min(img.width());
        if short > min_side {
            // smallest ratio whose floor still reaches min_side
            let lowest = min_side as f64 / short as f64;
            let ratio = plan.ratio.max(lowest);
            img = downsample_with_floor(&img, ratio, min_side)?;
        }
    }
    if plan.apply_blur {
        img = gaussian_blur(&img, plan.sigma)?;
    }
    Ok(img)
}

pub fn random_augment(image: &Image, seed: u64) -> Result<Image> {
    random_augment_with_floor(image, seed, MIN_SIDE)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TreeReport {
    pub images: usize,
    pub copied: usize,
}

fn is_jpeg(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("jpg") || e.eq_ignore_ascii_case("jpeg"))
}

fn is_image(path: &Path) -> bool {
    is_jpeg(path)
        || path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Applies `spec` to every PNG/JPEG under `input`, writing to the same
/// relative path under `output`; other files are copied unchanged.
///
/// A JPEG perturbation of a `.jpg` file stores the encoder's bytes, so decoding
/// the output reproduces [`jpeg_compress`]. Other operators re-encode `.jpg`
/// outputs at quality 100.
pub fn perturb_tree(spec: &PerturbationSpec, input: &Path, output: &Path, min_side: usize) -> Result<TreeReport> {
    if !input.is_dir() {
        return Err(invalid(format!("{} is not a directory", input.display())));
    }
    let mut report = TreeReport::default();
    let mut stack = vec![input.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let rel = dir.strip_prefix(input).expect("walk stays under input");
        std::fs::create_dir_all(output.join(rel))?;
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for path in entries {
            if path.is_dir() {
                if path != output {
                    stack.push(path);
                }
                continue;
            }
            let dst = output.join(path.strip_prefix(input).expect("under input"));
            if !is_image(&path) {
                std::fs::copy(&path, &dst)?;
                report.copied += 1;
                continue;
            }
            let img = Image::open(&path)?;
            if is_jpeg(&dst) {
                let bytes = match spec.op {
                    PerturbOp::Jpeg => jpeg_encode(&img, spec.param as u8)?,
                    _ => jpeg_encode(&spec.apply_with_floor(&img, min_side)?, 100)?,
                };
                std::fs::write(&dst, bytes)?;
            } else {
                spec.apply_with_floor(&img, min_side)?.save(&dst)?;
            }
            report.images += 1;
        }
    }
    Ok(report)
}
