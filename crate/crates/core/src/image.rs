//! Image and watermark rasters.
//!
//! Pixels live in `[0, 1]`, stored channel-planar (`R` plane, then `G`, then
//! `B`). Watermarks are binary single-channel masks rendered from text with
//! the bundled 8x8 bitmap font, so a render is a pure function of its inputs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use font8x8::UnicodeFonts;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
const GLYPH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `3 * height * width` values in `[0, 1]`, channel-planar.
    pub data: Vec<f64>,
    pub source_path: Option<String>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            bail!(Argument, "image dimensions must be positive, got {height}x{width}");
        }
        if data.len() != CHANNELS * height * width {
            bail!(Shape, "expected {} values for {height}x{width}x3, got {}", CHANNELS * height * width, data.len());
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(Argument, "pixel value {v} outside [0, 1]");
        }
        Ok(Image { height, width, data, source_path: None })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image { height, width, data: vec![value; CHANNELS * height * width], source_path: None }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Network input scaling: `[0, 1] -> [-1, 1]`.
    pub fn to_signed_tensor(&self) -> Tensor {
        Tensor::from_vec(CHANNELS, self.height, self.width, self.data.iter().map(|v| 2.0 * v - 1.0).collect())
    }

    pub fn is_in_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Per-pixel unweighted channel mean.
    pub fn grayscale(&self) -> Vec<f64> {
        let n = self.height * self.width;
        (0..n).map(|i| (self.data[i] + self.data[n + i] + self.data[2 * n + i]) / 3.0).collect()
    }

    /// Pixel data in interleaved `HxWx3` order.
    pub fn to_interleaved(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(CHANNELS * n);
        for i in 0..n {
            for c in 0..CHANNELS {
                out.push(self.data[c * n + i]);
            }
        }
        out
    }

    pub fn from_interleaved(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let n = height * width;
        if values.len() != CHANNELS * n {
            bail!(Shape, "expected {} interleaved values, got {}", CHANNELS * n, values.len());
        }
        let mut data = vec![0.0; CHANNELS * n];
        for i in 0..n {
            for c in 0..CHANNELS {
                data[c * n + i] = values[i * CHANNELS + c];
            }
        }
        Image::new(height, width, data)
    }
}

/// Where the text line goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// One line, centered both ways.
    #[default]
    Center,
    /// The centered line repeated vertically every two line heights.
    Tiled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderParams {
    /// Fraction of the image width the text line spans.
    pub width_fraction: f64,
    pub placement: Placement,
    /// Square dilation radius applied to the glyph strokes, in pixels.
    pub stroke_px: usize,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams { width_fraction: 0.8, placement: Placement::Center, stroke_px: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Watermark {
    pub height: usize,
    pub width: usize,
    /// `height * width` values, each exactly 0.0 or 1.0.
    pub mask: Vec<f64>,
    pub text: String,
    pub params: RenderParams,
}

impl Watermark {
    pub fn from_mask(height: usize, width: usize, mask: Vec<f64>, text: String, params: RenderParams) -> Result<Self> {
        if mask.len() != height * width {
            bail!(Shape, "mask has {} values, expected {}", mask.len(), height * width);
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            bail!(Argument, "watermark mask must be binary");
        }
        Ok(Watermark { height, width, mask, text, params })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn density(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len() as f64
    }

    /// The mask replicated to three channels as an [`Image`].
    pub fn to_image(&self) -> Image {
        let mut data = Vec::with_capacity(CHANNELS * self.mask.len());
        for _ in 0..CHANNELS {
            data.extend_from_slice(&self.mask);
        }
        Image { height: self.height, width: self.width, data, source_path: None }
    }

    /// Single-channel network input in `[-1, 1]`.
    pub fn to_signed_plane(&self) -> Vec<f64> {
        self.mask.iter().map(|v| 2.0 * v - 1.0).collect()
    }
}

fn glyph_rows(ch: char) -> Result<[u8; 8]> {
    if !(ch.is_ascii_alphanumeric() || ch == '_') {
        bail!(Render, "unsupported character {ch:?}; use letters, digits and underscore");
    }
    match font8x8::BASIC_FONTS.get(ch) {
        Some(rows) => Ok(rows),
        None => bail!(Render, "font has no glyph for {ch:?}"),
    }
}

/// Rasterizes `text` as white strokes on a black `height x width` mask.
///
/// The line is scaled so it spans `width_fraction` of the width (limited to
/// 80% of the height); a scale below one font pixel per mask pixel is
/// rejected as unrenderable.
pub fn render_watermark(text: &str, height: usize, width: usize, params: RenderParams) -> Result<Watermark> {
    if text.is_empty() {
        bail!(Render, "watermark text is empty");
    }
    if height == 0 || width == 0 {
        bail!(Argument, "watermark size must be positive, got {height}x{width}");
    }
    if !(params.width_fraction > 0.0 && params.width_fraction <= 1.0) {
        bail!(Argument, "width_fraction must be in (0, 1], got {}", params.width_fraction);
    }
    let glyphs = text.chars().map(glyph_rows).collect::<Result<Vec<_>>>()?;
    let cols = GLYPH * glyphs.len();
    let scale = (params.width_fraction * width as f64 / cols as f64).min(0.8 * height as f64 / GLYPH as f64);
    if scale < 1.0 {
        bail!(Render, "{text:?} does not fit in {height}x{width} at the minimum font size");
    }
    let box_w = libm::round(cols as f64 * scale) as usize;
    let box_h = libm::round(GLYPH as f64 * scale) as usize;
    let x0 = (width - box_w) / 2;
    let y_center = (height - box_h) / 2;

    let origins: Vec<usize> = match params.placement {
        Placement::Center => vec![y_center],
        Placement::Tiled => {
            let period = 2 * box_h;
            let first = y_center % period;
            (0..).map(|i| first + i * period).take_while(|y| y + box_h <= height).collect()
        }
    };

    let mut strokes = vec![false; height * width];
    for &y0 in &origins {
        for dy in 0..box_h {
            let gy = ((dy as f64 / scale) as usize).min(GLYPH - 1);
            for dx in 0..box_w {
                let col = ((dx as f64 / scale) as usize).min(cols - 1);
                let rows = &glyphs[col / GLYPH];
                if rows[gy] & (1 << (col % GLYPH)) != 0 {
                    strokes[(y0 + dy) * width + x0 + dx] = true;
                }
            }
        }
    }

    let mask = dilate(&strokes, height, width, params.stroke_px);
    Watermark::from_mask(height, width, mask, String::from(text), params)
}

fn dilate(src: &[bool], height: usize, width: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            if !src[y * width + x] {
                continue;
            }
            let (ylo, yhi) = (y.saturating_sub(radius), (y + radius).min(height - 1));
            let (xlo, xhi) = (x.saturating_sub(radius), (x + radius).min(width - 1));
            for yy in ylo..=yhi {
                for xx in xlo..=xhi {
                    out[yy * width + xx] = 1.0;
                }
            }
        }
    }
    out
}
