//! Single-pass cloaking: `x' = clamp(x + G(x | m))`.

use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::image::{Image, Watermark};
use crate::networks::Generator;
use crate::trainer::clamp_add;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloakOptions {
    /// Hard L-infinity bound on `x' - x`, off by default.
    pub linf_bound: Option<f64>,
}

impl CloakOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.linf_bound {
            if !(b.is_finite() && b >= 0.0) {
                bail!(Argument, "linf bound must be finite and non-negative, got {b}");
            }
        }
        Ok(())
    }
}

/// Statistics of the realized perturbation `x' - x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub rms: f64,
    pub max_abs: f64,
    /// RMS over watermark pixels only; 0 for an empty mask.
    pub watermark_rms: f64,
}

impl PerturbationStats {
    pub fn between(original: &Image, adversarial: &Image, m: &Watermark) -> Result<Self> {
        if original.dims() != adversarial.dims() || original.dims() != m.dims() {
            bail!(Shape, "stats need matching shapes: {:?}, {:?}, {:?}", original.dims(), adversarial.dims(), m.dims());
        }
        let plane = m.mask.len();
        let (mut sq, mut max_abs, mut wm_sq, mut wm_n) = (0.0, 0.0f64, 0.0, 0usize);
        for (i, (a, b)) in original.data.iter().zip(&adversarial.data).enumerate() {
            let d = b - a;
            sq += d * d;
            max_abs = max_abs.max(libm::fabs(d));
            if m.mask[i % plane] > 0.5 {
                wm_sq += d * d;
                wm_n += 1;
            }
        }
        Ok(PerturbationStats {
            rms: libm::sqrt(sq / original.data.len() as f64),
            max_abs,
            watermark_rms: if wm_n == 0 { 0.0 } else { libm::sqrt(wm_sq / wm_n as f64) },
        })
    }
}

/// Network evaluations spent on one cloak.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evaluations {
    pub generator_forwards: usize,
    pub discriminator_forwards: usize,
    pub encoder_calls: usize,
    pub backward_passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloakResult {
    pub adversarial: Image,
    pub stats: PerturbationStats,
    pub watermark_id: String,
    pub evaluations: Evaluations,
}

/// Looks a watermark up by its text.
pub fn find_watermark<'a>(marks: &'a [Watermark], id: &str) -> Result<&'a Watermark> {
    marks.iter().find(|m| m.text == id).ok_or_else(|| Error::UnknownWatermark(String::from(id)))
}

/// One generator forward pass, clamp to `[0, 1]`, optional L-infinity projection.
///
/// Evaluation counts are deltas of the generator's shared counters, so they
/// are exact only when no other thread drives the same generator meanwhile.
pub fn cloak_image(
    generator: &Generator,
    x: &Image,
    m: &Watermark,
    watermark_id: &str,
    opts: &CloakOptions,
) -> Result<CloakResult> {
    opts.validate()?;
    let (f0, b0) = (generator.forward_calls.get(), generator.backward_calls.get());
    let pert = generator.forward(x, m)?;
    let (mut adversarial, _) = clamp_add(x, &pert);
    if let Some(bound) = opts.linf_bound {
        for (a, &o) in adversarial.data.iter_mut().zip(&x.data) {
            let mut v = a.clamp(o - bound, o + bound).clamp(0.0, 1.0);
            // rounding in o +- bound can overshoot by an ulp
            while v - o > bound {
                v = v.next_down();
            }
            while o - v > bound {
                v = v.next_up();
            }
            *a = v;
        }
    }
    adversarial.source_path = x.source_path.clone();
    let stats = PerturbationStats::between(x, &adversarial, m)?;
    Ok(CloakResult {
        adversarial,
        stats,
        watermark_id: String::from(watermark_id),
        evaluations: Evaluations {
            generator_forwards: generator.forward_calls.get() - f0,
            backward_passes: generator.backward_calls.get() - b0,
            ..Evaluations::default()
        },
    })
}
