//! Synthetic stand-ins for camera photographs and generator outputs.
//!
//! Camera-like images go through a small capture pipeline (optics blur, Bayer
//! mosaic, signal-dependent sensor noise, bilinear demosaicing, in-camera
//! sharpening) whose knobs are written into EXIF. Generated-like images skip
//! the pipeline entirely.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::augment::gaussian_blur;
use crate::dataset::{DatasetManifest, ImageStore, Label, ManifestEntry, MemoryStore};
use crate::error::{invalid, Result};
use crate::exif::{parse_exif, ExifRecord};
use crate::imaging::{reflect, Image};
use crate::rng::{derive_seed, seeded, Rng};

/// A synthetic camera body: Bayer phase and sharpening strength are tied to it.
#[derive(Clone, Copy, Debug)]
struct Body {
    make: &'static str,
    model: &'static str,
    /// Row/column offset of the red site in the 2×2 Bayer tile.
    red: (usize, usize),
    sharpen: f32,
}

const BODIES: [Body; 4] = [
    Body {
        make: "Lumen",
        model: "Lumen L1",
        red: (0, 0),
        sharpen: 0.0,
    },
    Body {
        make: "Lumen",
        model: "Lumen L2",
        red: (0, 1),
        sharpen: 0.6,
    },
    Body {
        make: "Vireo",
        model: "Vireo V7",
        red: (1, 0),
        sharpen: 0.3,
    },
    Body {
        make: "Vireo",
        model: "Vireo V9",
        red: (1, 1),
        sharpen: 1.0,
    },
];

/// Relative raw sensitivity of the red, green and blue sites.
const RAW_GAIN: [f64; 3] = [0.5, 1.0, 0.625];

const ISO_STEPS: [f64; 6] = [100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0];
const F_STOPS: [f64; 7] = [1.8, 2.8, 4.0, 5.6, 8.0, 11.0, 16.0];
const BIAS_STEPS: [f64; 7] = [-1.0, -0.7, -0.3, 0.0, 0.3, 0.7, 1.0];

/// Latent capture settings of one camera-like image.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureParams {
    pub body: usize,
    pub iso: f64,
    pub f_number: f64,
    pub exposure_time: f64,
    pub focal_length: f64,
    pub exposure_bias: f64,
    pub flash: bool,
    pub manual_white_balance: bool,
    pub metering: usize,
    pub manual_exposure: bool,
}

impl CaptureParams {
    pub fn sample(rng: &mut Rng) -> Self {
        let iso = ISO_STEPS[rng.random_range(0..ISO_STEPS.len())];
        let f_number = F_STOPS[rng.random_range(0..F_STOPS.len())];
        // brighter settings trade against each other around a fixed exposure
        let jitter: f64 = rng.random_range(0.8..1.25);
        let exposure_time = 0.01 * (100.0 / iso) * (f_number / 4.0).powi(2) * jitter;
        Self {
            body: rng.random_range(0..BODIES.len()),
            iso,
            f_number,
            exposure_time,
            focal_length: (rng.random_range(18f64.ln()..200f64.ln())).exp().round(),
            exposure_bias: BIAS_STEPS[rng.random_range(0..BIAS_STEPS.len())],
            flash: rng.random_bool(0.3),
            manual_white_balance: rng.random_bool(0.25),
            metering: rng.random_range(0..3),
            manual_exposure: rng.random_bool(0.2),
        }
    }

    /// Sensor noise standard deviation at mid-gray.
    pub fn noise_std(&self) -> f64 {
        0.008 * (self.iso / 100.0).sqrt()
    }

    /// Optical blur grows with the f-number (diffraction) and focal length.
    pub fn blur_sigma(&self) -> f64 {
        0.25 + 0.06 * self.f_number + 0.001 * self.focal_length
    }

    pub fn exif(&self) -> ExifRecord {
        let body = BODIES[self.body];
        let scene = if self.focal_length >= 85.0 {
            "portrait"
        } else if self.focal_length <= 28.0 {
            "landscape"
        } else {
            "standard"
        };
        let metering = ["pattern", "center weighted average", "spot"][self.metering];
        let raw = [
            ("Make", body.make.to_string()),
            ("Model", body.model.to_string()),
            ("Flash", if self.flash { "flash fired" } else { "no flash" }.to_string()),
            ("MeteringMode", metering.to_string()),
            ("SceneCaptureType", scene.to_string()),
            ("ExposureMode", if self.manual_exposure { "manual" } else { "auto" }.to_string()),
            ("WhiteBalanceMode", if self.manual_white_balance { "manual" } else { "auto" }.to_string()),
            ("ExposureBiasValue", format!("{} EV", self.exposure_bias)),
            ("ISOSpeedRatings", format!("{}", self.iso)),
            ("ApertureValue", format!("F{}", self.f_number)),
            ("F-Number", format!("F{}", self.f_number)),
            ("ExposureTime", format!("{} sec", self.exposure_time)),
            ("ShutterSpeedValue", format!("{} sec", self.exposure_time)),
            ("FocalLength", format!("{} mm", self.focal_length)),
        ];
        parse_exif(raw).0
    }
}

/// Smooth random RGB scene: a handful of low-frequency cosines per channel.
fn scene(rng: &mut Rng, size: usize, max_freq: f64) -> Vec<f32> {
    let waves: Vec<[f64; 6]> = (0..5)
        .map(|_| {
            [
                rng.random_range(-max_freq..max_freq),
                rng.random_range(-max_freq..max_freq),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0),
            ]
        })
        .collect();
    let base: [f64; 3] = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    let mut out = Vec::with_capacity(size * size * 3);
    let scale = std::f64::consts::TAU / size as f64;
    for y in 0..size {
        for x in 0..size {
            let mut v = base;
            for w in &waves {
                let s = (scale * (w[0] * x as f64 + w[1] * y as f64) + w[2]).cos() * 0.05;
                v[0] += s * w[3];
                v[1] += s * w[4];
                v[2] += s * w[5];
            }
            out.extend(v.iter().map(|&c| c as f32));
        }
    }
    out
}

fn quantize(data: &mut [f32]) {
    for v in data {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Channel sampled at `(y, x)` by a Bayer tile whose red site is at `red`.
fn cfa_channel(y: usize, x: usize, red: (usize, usize)) -> usize {
    let (dy, dx) = ((y + 2 - red.0) % 2, (x + 2 - red.1) % 2);
    match (dy, dx) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Renders the camera pipeline for `params` into a `size`×`size` image.
pub fn render_camera(params: &CaptureParams, size: usize, seed: u64) -> Result<Image> {
    let mut rng = seeded(seed);
    let body = BODIES[params.body];
    let max_freq = 3.0 * (50.0 / params.focal_length).sqrt();
    let mut light = scene(&mut rng, size, max_freq);
    let gain = (0.25 * params.exposure_bias).exp2() as f32 + if params.flash { 0.05 } else { 0.0 };
    let tint: [f32; 3] = if params.manual_white_balance { [1.1, 1.0, 0.85] } else { [1.0; 3] };
    for (i, v) in light.iter_mut().enumerate() {
        *v *= gain * tint[i % 3];
    }
    let optics = gaussian_blur(&Image::new(size, size, light)?, params.blur_sigma())?;

    // one noisy raw sample per site; white balance undoes the channel gains later
    let sd = params.noise_std();
    let mut mosaic = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let c = cfa_channel(y, x, body.red);
            let s = f64::from(optics.get(y, x, c)) * RAW_GAIN[c];
            let n: f64 = StandardNormal.sample(&mut rng);
            mosaic[y * size + x] = (s + n * sd * (0.2 + 1.6 * s.max(0.0)).sqrt()) as f32;
        }
    }

    // bilinear demosaic: average same-colour sites in the 3×3 neighbourhood
    let mut rgb = vec![0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let own = cfa_channel(y, x, body.red);
            for c in 0..3 {
                let v = if c == own {
                    mosaic[y * size + x]
                } else {
                    let (mut sum, mut n) = (0f32, 0f32);
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let yy = reflect(y as isize + dy, size);
                            let xx = reflect(x as isize + dx, size);
                            if cfa_channel(yy, xx, body.red) == c {
                                sum += mosaic[yy * size + xx];
                                n += 1.0;
                            }
                        }
                    }
                    sum / n
                };
                rgb[(y * size + x) * 3 + c] = v / RAW_GAIN[c] as f32;
            }
        }
    }
    let mut img = Image::new(size, size, rgb)?;
    if body.sharpen > 0.0 {
        let soft = gaussian_blur(&img, 1.0)?;
        for (v, s) in img.data_mut().iter_mut().zip(soft.data()) {
            *v += body.sharpen * (*v - s);
        }
    }
    quantize(img.data_mut());
    Ok(img)
}

/// A camera-like image with its EXIF record.
pub fn camera_image(size: usize, seed: u64) -> Result<(Image, ExifRecord)> {
    let params = CaptureParams::sample(&mut seeded(derive_seed(seed, &[1])));
    let img = render_camera(&params, size, derive_seed(seed, &[2]))?;
    Ok((img, params.exif()))
}

/// Families of generated-like images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorFamily {
    /// Gaussian-smoothed white noise.
    Smooth,
    /// Low-resolution noise brought up 2× by zero insertion and a fixed
    /// interpolation kernel, leaving a periodic upsampling trace.
    Upsampled,
}

impl GeneratorFamily {
    pub const ALL: [GeneratorFamily; 2] = [GeneratorFamily::Smooth, GeneratorFamily::Upsampled];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorFamily::Smooth => "smooth",
            GeneratorFamily::Upsampled => "upsampled",
        }
    }
}

fn noise_image(rng: &mut Rng, size: usize) -> Result<Image> {
    let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
    Image::new(size, size, data)
}

/// Rescales every channel to a random range inside `[0.1, 0.9]`.
fn stretch(img: &mut Image, rng: &mut Rng) {
    let data = img.data_mut();
    for c in 0..3 {
        let (lo, hi) = data
            .iter()
            .skip(c)
            .step_by(3)
            .fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let span = (hi - lo).max(1e-6);
        let a: f32 = rng.random_range(0.1..0.4);
        let b: f32 = rng.random_range(0.6..0.9);
        for v in data.iter_mut().skip(c).step_by(3) {
            *v = a + (b - a) * (*v - lo) / span;
        }
    }
}

pub fn generated_image(family: GeneratorFamily, size: usize, seed: u64) -> Result<Image> {
    let mut rng = seeded(seed);
    let mut img = match family {
        GeneratorFamily::Smooth => {
            let sigma = rng.random_range(2.0..4.0);
            gaussian_blur(&noise_image(&mut rng, size)?, sigma)?
        }
        GeneratorFamily::Upsampled => {
            let half = size.div_ceil(2);
            let sigma = rng.random_range(0.5..1.5);
            let low = gaussian_blur(&noise_image(&mut rng, half)?, sigma)?;
            let k = [0.25f32, 0.5, 0.25];
            let mut up = vec![0f32; size * size * 3];
            for y in 0..size {
                for x in 0..size {
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for (i, ky) in k.iter().enumerate() {
                            for (j, kx) in k.iter().enumerate() {
                                let yy = y as isize + i as isize - 1;
                                let xx = x as isize + j as isize - 1;
                                if yy < 0 || xx < 0 || yy % 2 != 0 || xx % 2 != 0 {
                                    continue;
                                }
                                let (ly, lx) = ((yy / 2) as usize, (xx / 2) as usize);
                                if ly < half && lx < half {
                                    acc += 4.0 * ky * kx * low.get(ly, lx, c);
                                }
                            }
                        }
                        up[(y * size + x) * 3 + c] = acc;
                    }
                }
            }
            Image::new(size, size, up)?
        }
    };
    stretch(&mut img, &mut rng);
    quantize(img.data_mut());
    Ok(img)
}

/// What to generate for a synthetic suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteSpec {
    pub size: usize,
    pub camera: usize,
    /// Count per generator family.
    pub generated: Vec<(GeneratorFamily, usize)>,
    pub seed: u64,
}

/// A manifest with `camera/NNNNN.png` photographs (source `camera`, complete
/// EXIF) and `<family>/NNNNN.png` generated images (source = family name).
pub fn build_suite(spec: &SuiteSpec) -> Result<(DatasetManifest, MemoryStore)> {
    if spec.size < 8 {
        return Err(invalid("synthetic images need a side of at least 8"));
    }
    let mut store = MemoryStore::new();
    let mut entries = Vec::new();
    for i in 0..spec.camera {
        let (img, exif) = camera_image(spec.size, derive_seed(spec.seed, &[0xca, i as u64]))?;
        let path = format!("camera/{i:05}.png");
        store.insert(path.clone(), img);
        entries.push(ManifestEntry::new(path, Label::Photographic, "camera").with_exif(exif));
    }
    for &(family, count) in &spec.generated {
        for i in 0..count {
            let img = generated_image(family, spec.size, derive_seed(spec.seed, &[0x9e, family as u64, i as u64]))?;
            let path = format!("{}/{i:05}.png", family.name());
            store.insert(path.clone(), img);
            entries.push(ManifestEntry::new(path, Label::Generated, family.name()));
        }
    }
    Ok((DatasetManifest::from_entries(entries)?, store))
}

/// Writes a suite's images under `root` and its manifest to `root/manifest.jsonl`.
pub fn write_suite(manifest: &DatasetManifest, store: &MemoryStore, root: &Path) -> Result<()> {
    for e in &manifest.entries {
        let path = root.join(&e.image_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        store.load(&e.image_path)?.save(&path)?;
    }
    manifest.save(&root.join("manifest.jsonl"))
}
