//! Signature scan preprocessing: Otsu background cleaning, content crop, bilinear
//! resize and [0, 1] scaling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub const BACKGROUND: u8 = 255;

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape(
                "gray_image",
                format!("{height}x{width} with {} pixels", pixels.len()),
            ));
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        GrayImage { height, width, pixels: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.pixels[row * self.width + col] = v;
    }

    /// Reads PGM (P2/P5) or PNG; color inputs are converted to luma.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .to_luma8();
        let (w, h) = img.dimensions();
        GrayImage::new(h as usize, w as usize, img.into_raw())
    }

    /// Writes a binary (P5) PGM.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend_from_slice(&self.pixels);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Real-valued image produced by resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl From<&GrayImage> for FloatImage {
    fn from(img: &GrayImage) -> Self {
        FloatImage {
            height: img.height,
            width: img.width,
            data: img.pixels.iter().map(|&p| p as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepConfig {
    pub target_height: usize,
    pub target_width: usize,
    /// Blank pixels kept around the content bounding box.
    pub crop_margin: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig { target_height: 128, target_width: 200, crop_margin: 2 }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_height < 8 || self.target_width < 8 {
            return Err(Error::Config(format!(
                "target size {}x{} is below 8x8",
                self.target_height, self.target_width
            )));
        }
        Ok(())
    }
}

/// Otsu threshold: the `t` maximizing between-class variance when the classes are
/// `<= t` and `> t`. Ties go to the lower threshold.
pub fn otsu_threshold(img: &GrayImage) -> Result<u8> {
    let mut hist = [0u64; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    if let Some(v) = hist.iter().position(|&c| c as usize == img.pixels.len()) {
        return Err(Error::DegenerateHistogram(v as u8));
    }
    let total = img.pixels.len() as f64;
    let total_sum: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best = (0u8, f64::NEG_INFINITY);
    for (t, &count) in hist.iter().enumerate() {
        n0 += count;
        s0 += t as u64 * count;
        let n1 = img.pixels.len() as u64 - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let var = between_class_variance(n0, s0, n1, total_sum - s0, total);
        if var > best.1 {
            best = (t as u8, var);
        }
    }
    Ok(best.0)
}

/// `w0 * w1 * (mu0 - mu1)^2` from class counts and intensity sums.
pub fn between_class_variance(n0: u64, s0: u64, n1: u64, s1: u64, total: f64) -> f64 {
    let (w0, w1) = (n0 as f64 / total, n1 as f64 / total);
    let (mu0, mu1) = (s0 as f64 / n0 as f64, s1 as f64 / n1 as f64);
    w0 * w1 * (mu0 - mu1) * (mu0 - mu1)
}

/// Sets every pixel brighter than `threshold` to white.
pub fn clean_background(img: &GrayImage, threshold: u8) -> GrayImage {
    let pixels = img.pixels.iter().map(|&p| if p > threshold { BACKGROUND } else { p }).collect();
    GrayImage { pixels, ..*img }
}

/// Tight bounding box of non-white pixels grown by `margin` on every side, clamped to
/// the image.
pub fn crop_to_content(img: &GrayImage, margin: usize) -> Result<GrayImage> {
    let mut rows = (usize::MAX, 0);
    let mut cols = (usize::MAX, 0);
    for r in 0..img.height {
        for c in 0..img.width {
            if img.get(r, c) != BACKGROUND {
                rows = (rows.0.min(r), rows.1.max(r));
                cols = (cols.0.min(c), cols.1.max(c));
            }
        }
    }
    if rows.0 == usize::MAX {
        return Err(Error::EmptyContent);
    }
    let r0 = rows.0.saturating_sub(margin);
    let r1 = (rows.1 + margin).min(img.height - 1);
    let c0 = cols.0.saturating_sub(margin);
    let c1 = (cols.1 + margin).min(img.width - 1);
    let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
    let mut pixels = Vec::with_capacity(h * w);
    for r in r0..=r1 {
        pixels.extend_from_slice(&img.pixels[r * img.width + c0..=r * img.width + c1]);
    }
    GrayImage::new(h, w, pixels)
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`); source
/// coordinates are clamped to the border.
pub fn bilinear_resize(img: &FloatImage, out_h: usize, out_w: usize) -> FloatImage {
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, img.height);
    let xs = axis(out_w, img.width);
    let at = |r: usize, c: usize| img.data[r * img.width + c];
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    FloatImage { height: out_h, width: out_w, data }
}

/// Intensities divided by 255, as a `[1,H,W]` tensor.
pub fn normalize01(img: &FloatImage) -> Tensor {
    Tensor::new(vec![1, img.height, img.width], img.data.iter().map(|v| v / 255.0).collect())
        .expect("image dims are positive")
}

/// Full pipeline: Otsu cleaning, content crop, resize, scaling.
pub fn preprocess(raw: &GrayImage, cfg: &PrepConfig) -> Result<Tensor> {
    let t = otsu_threshold(raw)?;
    let cleaned = clean_background(raw, t);
    let cropped = crop_to_content(&cleaned, cfg.crop_margin)?;
    let resized = bilinear_resize(&FloatImage::from(&cropped), cfg.target_height, cfg.target_width);
    Ok(normalize01(&resized))
}
