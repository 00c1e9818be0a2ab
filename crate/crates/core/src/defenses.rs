//! Purification transforms: JPEG round trip, Gaussian-noise smoothing and
//! anisotropic total-variation minimization.
//!
//! JPEG needs a codec, which lives outside this crate; [`apply_defense_with`]
//! takes it as a callback.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::{seeded, standard_normal, stream};

pub const TVM_STEP: f64 = 0.1;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Jpeg,
    Rs,
    Tvm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub jpeg_quality: u8,
    pub rs_sigma: f64,
    pub tvm_lambda: f64,
    pub tvm_iters: usize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig { kind: DefenseKind::Jpeg, jpeg_quality: 75, rs_sigma: 0.05, tvm_lambda: 0.01, tvm_iters: 30 }
    }
}

impl DefenseConfig {
    pub fn of(kind: DefenseKind) -> Self {
        DefenseConfig { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.jpeg_quality) {
            bail!(Argument, "jpeg_quality must be in 1..=100, got {}", self.jpeg_quality);
        }
        if !(self.rs_sigma.is_finite() && self.rs_sigma >= 0.0) {
            bail!(Argument, "rs_sigma must be finite and non-negative, got {}", self.rs_sigma);
        }
        if !(self.tvm_lambda.is_finite() && self.tvm_lambda >= 0.0) {
            bail!(Argument, "tvm_lambda must be finite and non-negative, got {}", self.tvm_lambda);
        }
        Ok(())
    }
}

/// `clamp(x + N(0, sigma^2))` with noise drawn from `seed`.
pub fn randomized_smoothing(x: &Image, sigma: f64, seed: u64) -> Image {
    if sigma == 0.0 {
        return x.clone();
    }
    let mut rng = seeded(seed, stream::DEFENSE_NOISE);
    let data = x.data.iter().map(|&v| (v + sigma * standard_normal(&mut rng)).clamp(0.0, 1.0)).collect();
    Image { height: x.height, width: x.width, data, source_path: x.source_path.clone() }
}

/// Anisotropic total variation: sum of absolute forward differences over
/// both axes and all channels.
pub fn total_variation(x: &Image) -> f64 {
    tv(&x.data, x.height, x.width)
}

fn tv(data: &[f64], h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for plane in data.chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if x + 1 < w {
                    s += libm::fabs(plane[y * w + x + 1] - v);
                }
                if y + 1 < h {
                    s += libm::fabs(plane[(y + 1) * w + x] - v);
                }
            }
        }
    }
    s
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn objective(z: &[f64], x: &[f64], h: usize, w: usize, lambda: f64) -> f64 {
    z.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() + lambda * tv(z, h, w)
}

fn subgradient(z: &[f64], x: &[f64], h: usize, w: usize, lambda: f64) -> Vec<f64> {
    let mut g: Vec<f64> = z.iter().zip(x).map(|(a, b)| 2.0 * (a - b)).collect();
    for (c, plane) in z.chunks(h * w).enumerate() {
        let off = c * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                if xx + 1 < w {
                    let s = lambda * sign(plane[i + 1] - plane[i]);
                    g[off + i + 1] += s;
                    g[off + i] -= s;
                }
                if y + 1 < h {
                    let s = lambda * sign(plane[i + w] - plane[i]);
                    g[off + i + w] += s;
                    g[off + i] -= s;
                }
            }
        }
    }
    g
}

/// Projected subgradient descent on `||z - x||^2 + lambda * TV(z)` over
/// `[0, 1]`, starting at `x`. Each iteration tries step [`TVM_STEP`] and
/// halves it until the objective does not increase (keeping `z` if no step
/// qualifies). Returns the result and the objective after every iteration.
pub fn tvm_with_trace(x: &Image, lambda: f64, iters: usize) -> (Image, Vec<f64>) {
    let (h, w) = x.dims();
    let mut z = x.data.clone();
    let mut f = objective(&z, &x.data, h, w, lambda);
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let g = subgradient(&z, &x.data, h, w, lambda);
        let mut step = TVM_STEP;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = z.iter().zip(&g).map(|(v, d)| (v - step * d).clamp(0.0, 1.0)).collect();
            let fc = objective(&cand, &x.data, h, w, lambda);
            if fc <= f {
                z = cand;
                f = fc;
                break;
            }
            step *= 0.5;
        }
        trace.push(f);
    }
    (Image { height: h, width: w, data: z, source_path: x.source_path.clone() }, trace)
}

pub fn total_variation_minimization(x: &Image, lambda: f64, iters: usize) -> Image {
    tvm_with_trace(x, lambda, iters).0
}

/// Applies the configured defense; `jpeg` performs the codec round trip at the
/// given quality.
pub fn apply_defense_with(
    x: &Image,
    cfg: &DefenseConfig,
    seed: u64,
    jpeg: impl FnOnce(&Image, u8) -> Result<Image>,
) -> Result<Image> {
    cfg.validate()?;
    if x.data.len() != CHANNELS * x.height * x.width {
        bail!(Shape, "image buffer does not match {}x{}", x.height, x.width);
    }
    match cfg.kind {
        DefenseKind::Jpeg => jpeg(x, cfg.jpeg_quality),
        DefenseKind::Rs => Ok(randomized_smoothing(x, cfg.rs_sigma, seed)),
        DefenseKind::Tvm => Ok(total_variation_minimization(x, cfg.tvm_lambda, cfg.tvm_iters)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::natural_image;

    #[test]
    fn rs_zero_sigma_is_identity() {
        let x = natural_image(16, 16, 1);
        assert_eq!(randomized_smoothing(&x, 0.0, 9), x);
        let y = randomized_smoothing(&x, 0.05, 9);
        assert_eq!(y, randomized_smoothing(&x, 0.05, 9));
        assert_ne!(y, randomized_smoothing(&x, 0.05, 10));
        assert!(y.is_in_range());
    }

    #[test]
    fn tvm_constant_fixed_point() {
        let x = Image::filled(12, 12, 0.4);
        assert_eq!(total_variation_minimization(&x, 0.05, 30), x);
    }

    #[test]
    fn tvm_reduces_tv_on_noise() {
        let x = randomized_smoothing(&natural_image(24, 24, 2), 0.1, 3);
        let (z, trace) = tvm_with_trace(&x, 0.05, 30);
        assert!(total_variation(&z) < total_variation(&x));
        assert!(trace.windows(2).all(|p| p[1] <= p[0]));
        assert!(z.is_in_range());
    }

    #[test]
    fn config_validation() {
        assert!(DefenseConfig { jpeg_quality: 0, ..Default::default() }.validate().is_err());
        assert!(DefenseConfig { jpeg_quality: 101, ..Default::default() }.validate().is_err());
        assert!(DefenseConfig { rs_sigma: -0.1, ..Default::default() }.validate().is_err());
        assert!(DefenseConfig::default().validate().is_ok());
    }

    #[test]
    fn jpeg_dispatches_to_codec() {
        let x = natural_image(8, 8, 1);
        let out = apply_defense_with(&x, &DefenseConfig::default(), 0, |img, q| {
            assert_eq!(q, 75);
            Ok(img.clone())
        })
        .unwrap();
        assert_eq!(out, x);
    }
}
