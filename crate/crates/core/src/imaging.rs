//! RGB raster type shared by the data pipeline, perturbations and the backbone.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{invalid, Result};

/// Height × width × 3 image with channel values in `[0, 1]`, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(invalid(format!(
                "{} values do not form a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Rec. 601 luma of every pixel, row-major.
    pub fn luminance(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// `size`×`size` window with top-left corner at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Image {
        assert!(top + size <= self.height && left + size <= self.width);
        let mut data = Vec::with_capacity(size * size * 3);
        for y in top..top + size {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + size * 3]);
        }
        Image {
            height: size,
            width: size,
            data,
        }
    }

    /// Mirror-pads so that both sides are at least `min_side`.
    pub fn pad_to(&self, min_side: usize) -> Image {
        if self.height >= min_side && self.width >= min_side {
            return self.clone();
        }
        let h = self.height.max(min_side);
        let w = self.width.max(min_side);
        Image::from_fn(h, w, |y, x, c| {
            self.get(reflect(y as isize, self.height), reflect(x as isize, self.width), c)
        })
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Image {
        // Grayscale inputs are replicated to three channels here.
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        Image {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Image> {
        Ok(Self::from_dynamic(&image::load_from_memory(bytes)?))
    }

    pub fn open(path: &Path) -> Result<Image> {
        Ok(Self::from_dynamic(&image::open(path)?))
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    /// Writes the image; the format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// Half-sample symmetric index reflection (`d c b a | a b c d | d c b a`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}
