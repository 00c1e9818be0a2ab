//! Toy image-to-image imitation backend.
//!
//! Encodes with the same [`ToyEncoder`] the adversarial loss targets, mixes
//! the latent toward seeded noise by `strength`, and decodes with a linear
//! per-patch decoder. The decoder's reconstruction error is added back with
//! weight `(1 - strength)^8`, standing in for the source detail a
//! high-fidelity autoencoder keeps at low strength. The decoder is least-squares fitted to the encoder on a
//! fixed set of procedural images when the backend is built, so it is a pure
//! function of the encoder seed and [`DECODER_FIT_VERSION`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::{Image, CHANNELS};
use crate::latent::{LatentCode, LatentEncoder, ToyEncoder, TOY_FACTOR, TOY_LATENT_CHANNELS};
use crate::rng::{seeded, standard_normal, stream};
use crate::synth::natural_image;

/// Bumped whenever the fitting set or procedure changes.
pub const DECODER_FIT_VERSION: u32 = 1;
const FIT_IMAGES: usize = 40;
/// Exponent of the detail carry-over weight `(1 - s)^k`.
const DETAIL_FADE: i32 = 8;
const FIT_SIZE: usize = 64;
const RIDGE: f64 = 1e-6;
const PATCH: usize = CHANNELS * TOY_FACTOR * TOY_FACTOR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImitationConfig {
    pub strength: f64,
    pub seed: u64,
    /// Forwarded to external backends; the toy backend ignores it.
    pub prompt: Option<String>,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        ImitationConfig { strength: 0.3, seed: 0, prompt: None }
    }
}

impl ImitationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            bail!(Argument, "strength must be in [0, 1], got {}", self.strength);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToyImitator {
    encoder: ToyEncoder,
    /// `(latent channels + 1) x PATCH`; the last row is the per-pixel offset.
    decoder: DMatrix<f64>,
    latent_mean: [f64; TOY_LATENT_CHANNELS],
    latent_std: [f64; TOY_LATENT_CHANNELS],
}

fn patch_index(c: usize, dy: usize, dx: usize) -> usize {
    (c * TOY_FACTOR + dy) * TOY_FACTOR + dx
}

impl ToyImitator {
    pub fn new(encoder_seed: u64) -> Self {
        let encoder = ToyEncoder::new(encoder_seed);
        let k = TOY_LATENT_CHANNELS + 1;
        let mut gram = DMatrix::<f64>::zeros(k, k);
        let mut cross = DMatrix::<f64>::zeros(k, PATCH);
        let mut sum = [0.0; TOY_LATENT_CHANNELS];
        let mut sum_sq = [0.0; TOY_LATENT_CHANNELS];
        let mut count = 0usize;

        let mut rng = seeded(encoder_seed, stream::DECODER_FIT);
        for _ in 0..FIT_IMAGES {
            let seed = rand::Rng::random::<u64>(&mut rng);
            let img = natural_image(FIT_SIZE, FIT_SIZE, seed);
            let z = encoder.encode(&img).expect("fit images are factor-aligned");
            let signed = img.to_signed_tensor();
            for ly in 0..z.height {
                for lx in 0..z.width {
                    let mut feat = DVector::<f64>::zeros(k);
                    for c in 0..TOY_LATENT_CHANNELS {
                        let v = z.at(c, ly, lx);
                        feat[c] = v;
                        sum[c] += v;
                        sum_sq[c] += v * v;
                    }
                    feat[TOY_LATENT_CHANNELS] = 1.0;
                    count += 1;
                    gram += &feat * feat.transpose();
                    for c in 0..CHANNELS {
                        for dy in 0..TOY_FACTOR {
                            for dx in 0..TOY_FACTOR {
                                let p = signed.at(c, ly * TOY_FACTOR + dy, lx * TOY_FACTOR + dx);
                                let col = patch_index(c, dy, dx);
                                for r in 0..k {
                                    cross[(r, col)] += feat[r] * p;
                                }
                            }
                        }
                    }
                }
            }
        }
        for i in 0..k {
            gram[(i, i)] += RIDGE * count as f64;
        }
        let decoder = gram.cholesky().expect("ridge-regularized gram matrix is positive definite").solve(&cross);

        let n = count as f64;
        let latent_mean = core::array::from_fn(|c| sum[c] / n);
        let latent_std = core::array::from_fn(|c| libm::sqrt((sum_sq[c] / n - (sum[c] / n) * (sum[c] / n)).max(0.0)));
        ToyImitator { encoder, decoder, latent_mean, latent_std }
    }

    pub fn encoder(&self) -> &ToyEncoder {
        &self.encoder
    }

    pub fn decode(&self, z: &LatentCode) -> Image {
        let (h, w) = (z.height * TOY_FACTOR, z.width * TOY_FACTOR);
        let mut data = vec![0.0; CHANNELS * h * w];
        let mut feat = [0.0; TOY_LATENT_CHANNELS + 1];
        feat[TOY_LATENT_CHANNELS] = 1.0;
        for ly in 0..z.height {
            for lx in 0..z.width {
                for (c, f) in feat.iter_mut().take(TOY_LATENT_CHANNELS).enumerate() {
                    *f = z.at(c, ly, lx);
                }
                for c in 0..CHANNELS {
                    for dy in 0..TOY_FACTOR {
                        for dx in 0..TOY_FACTOR {
                            let col = patch_index(c, dy, dx);
                            let v: f64 = feat.iter().enumerate().map(|(r, f)| f * self.decoder[(r, col)]).sum();
                            let (y, x) = (ly * TOY_FACTOR + dy, lx * TOY_FACTOR + dx);
                            data[(c * h + y) * w + x] = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        Image { height: h, width: w, data, source_path: None }
    }

    /// `decode((1 - s) * enc(x) + s * noise) - (1 - s)^8 * (decode(enc(x)) - x)`,
    /// clamped to `[0, 1]`, with noise matching the latent statistics of the
    /// fitting set. Strength 0 returns `x`; strength 1 forgets it entirely.
    pub fn simulate(&self, x: &Image, cfg: &ImitationConfig) -> Result<Image> {
        cfg.validate()?;
        let z = self.encoder.encode(x)?;
        let s = cfg.strength;
        if s == 0.0 {
            return Ok(Image { source_path: None, ..x.clone() });
        }
        let mut rng = seeded(cfg.seed, stream::IMITATION_NOISE);
        let plane = z.plane_len();
        let mixed: Vec<f64> = z
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                let noise = self.latent_mean[c] + self.latent_std[c] * standard_normal(&mut rng);
                (1.0 - s) * v + s * noise
            })
            .collect();
        let mut out = self.decode(&z.with_data(mixed));
        let carry = libm::pow(1.0 - s, DETAIL_FADE as f64);
        if carry > 0.0 {
            let rec = self.decode(&z);
            for ((o, r), v) in out.data.iter_mut().zip(&rec.data).zip(&x.data) {
                *o = (*o - carry * (r - v)).clamp(0.0, 1.0);
            }
        }
        out.source_path = None;
        Ok(out)
    }
}
