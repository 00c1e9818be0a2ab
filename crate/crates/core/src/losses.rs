//! Training losses: discriminator loss, non-saturating generator GAN loss,
//! watermark-weighted hinge perturbation loss, latent adversarial loss and
//! the combined generator objective `L_adv + alpha * L_gan + beta * L_pert`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::{Image, Watermark, CHANNELS};
use crate::latent::{LatentCode, LatentEncoder};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                bail!(Argument, "{name} must be finite and non-negative, got {v}");
            }
        }
        Ok(())
    }
}

/// Hinge bound `c` on the weighted perturbation RMS, and the extra weight `w`
/// applied inside the watermark region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationBudget {
    pub c: f64,
    pub w: f64,
}

impl Default for PerturbationBudget {
    fn default() -> Self {
        PerturbationBudget { c: 10.0 / 255.0, w: 4.0 }
    }
}

impl PerturbationBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c <= 1.0) {
            bail!(Argument, "c must be in (0, 1], got {}", self.c);
        }
        if !(self.w.is_finite() && self.w >= 0.0) {
            bail!(Argument, "w must be finite and non-negative, got {}", self.w);
        }
        Ok(())
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    xs.sum::<f64>() / n as f64
}

/// `-[mean(log D(x)) + mean(log(1 - D(x')))]`, minimized by the discriminator.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
    let real = mean(d_real.iter().map(|&p| libm::log(clamp_prob(p))));
    let fake = mean(d_fake.iter().map(|&p| libm::log(1.0 - clamp_prob(p))));
    -(real + fake)
}

/// Derivatives of [`discriminator_loss`] with respect to each probability.
pub fn discriminator_loss_grads(d_real: &[f64], d_fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let inside = |p: f64| (PROB_EPS..=1.0 - PROB_EPS).contains(&p);
    let nr = d_real.len() as f64;
    let nf = d_fake.len() as f64;
    let gr = d_real.iter().map(|&p| if inside(p) { -1.0 / (nr * p) } else { 0.0 }).collect();
    let gf = d_fake.iter().map(|&p| if inside(p) { 1.0 / (nf * (1.0 - p)) } else { 0.0 }).collect();
    (gr, gf)
}

/// Non-saturating generator loss `-mean(log D(x'))`.
pub fn generator_gan_loss(d_fake: &[f64]) -> f64 {
    -mean(d_fake.iter().map(|&p| libm::log(clamp_prob(p))))
}

pub fn generator_gan_loss_grads(d_fake: &[f64]) -> Vec<f64> {
    let n = d_fake.len() as f64;
    d_fake
        .iter()
        .map(|&p| if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) { -1.0 / (n * p) } else { 0.0 })
        .collect()
}

fn check_pert(pert: &Tensor, m: &Watermark) -> Result<()> {
    if pert.shape() != (CHANNELS, m.height, m.width) {
        bail!(Shape, "perturbation {:?} does not match watermark {:?}", pert.shape(), m.dims());
    }
    Ok(())
}

/// `RMS(pert * (1 + w * m))` with the mask broadcast over channels.
///
/// Computed as `s * sqrt(mean((q / s)^2))` with `s = max |q|`, which is exact
/// for constant fields so the hinge boundary is hit without rounding error.
pub fn weighted_rms(pert: &Tensor, m: &Watermark, w: f64) -> Result<f64> {
    check_pert(pert, m)?;
    let n = m.mask.len();
    let weighted = |i: usize, p: f64| p * (1.0 + w * m.mask[i % n]);
    let scale = pert.data.iter().enumerate().map(|(i, &p)| libm::fabs(weighted(i, p))).fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(0.0);
    }
    let sum_sq: f64 = pert
        .data
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let q = weighted(i, p) / scale;
            q * q
        })
        .sum();
    Ok(scale * libm::sqrt(sum_sq / pert.data.len() as f64))
}

/// Per-sample hinge `max(0, weighted_rms - c)` and its gradient with respect
/// to the perturbation. At the kink the gradient of the zero branch is used.
pub fn perturbation_hinge(pert: &Tensor, m: &Watermark, budget: &PerturbationBudget) -> Result<(f64, Tensor)> {
    let rms = weighted_rms(pert, m, budget.w)?;
    if rms <= budget.c {
        return Ok((0.0, Tensor::zeros(pert.channels, pert.height, pert.width)));
    }
    let n = m.mask.len();
    let denom = pert.data.len() as f64 * rms;
    let grad = pert
        .data
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let f = 1.0 + budget.w * m.mask[i % n];
            p * f * f / denom
        })
        .collect();
    Ok((rms - budget.c, pert.with_data(grad)))
}

/// Batch mean of the per-sample hinge.
pub fn perturbation_loss(perts: &[Tensor], marks: &[&Watermark], budget: &PerturbationBudget) -> Result<f64> {
    if perts.len() != marks.len() || perts.is_empty() {
        bail!(Shape, "{} perturbations for {} watermarks", perts.len(), marks.len());
    }
    let mut total = 0.0;
    for (p, m) in perts.iter().zip(marks) {
        total += perturbation_hinge(p, m, budget)?.0;
    }
    Ok(total / perts.len() as f64)
}

/// `||a - b||_2` over all latent elements.
pub fn latent_distance(a: &LatentCode, b: &LatentCode) -> Result<f64> {
    if a.shape() != b.shape() {
        bail!(Shape, "latent codes {:?} and {:?} differ in shape", a.shape(), b.shape());
    }
    Ok(libm::sqrt(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum()))
}

/// Per-sample `||enc(x_adv) - target||_2` and its gradient with respect to the
/// pixels of `x_adv`. The gradient is zero when the codes coincide.
pub fn adversarial_term<E: LatentEncoder + ?Sized>(
    enc: &E,
    x_adv: &Image,
    target: &LatentCode,
) -> Result<(f64, Tensor)> {
    let z = enc.encode(x_adv)?;
    let dist = latent_distance(&z, target)?;
    if dist == 0.0 {
        return Ok((0.0, Tensor::zeros(CHANNELS, x_adv.height, x_adv.width)));
    }
    let upstream = z.with_data(z.data.iter().zip(&target.data).map(|(a, b)| (a - b) / dist).collect());
    Ok((dist, enc.encode_vjp(x_adv, &upstream)?))
}

/// Batch mean of `||enc(x_adv) - enc(m)||_2`, the watermark broadcast to three channels.
pub fn adversarial_loss<E: LatentEncoder + ?Sized>(enc: &E, x_adv: &[Image], marks: &[&Watermark]) -> Result<f64> {
    if x_adv.len() != marks.len() || x_adv.is_empty() {
        bail!(Shape, "{} images for {} watermarks", x_adv.len(), marks.len());
    }
    let mut total = 0.0;
    for (x, m) in x_adv.iter().zip(marks) {
        let target = enc.encode(&m.to_image())?;
        total += latent_distance(&enc.encode(x)?, &target)?;
    }
    Ok(total / x_adv.len() as f64)
}

pub fn total_generator_objective(l_adv: f64, l_gan_g: f64, l_pert: f64, weights: &LossWeights) -> f64 {
    l_adv + weights.alpha * l_gan_g + weights.beta * l_pert
}
