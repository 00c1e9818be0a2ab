//! Alternating minimax training of the generator and discriminator against a
//! frozen latent encoder.
//!
//! Each step updates the discriminator once on real images versus detached
//! adversarial images, then updates the generator once on
//! `L_adv + alpha * L_gan + beta * L_pert` using the freshly updated
//! discriminator. Adversarial images are `clamp(x + G(x | m), 0, 1)`; the
//! gradient flows only through unclamped pixels.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::image::{Image, Watermark};
use crate::latent::{LatentCode, LatentEncoder};
use crate::layers::Grads;
use crate::losses::{
    adversarial_term, discriminator_loss, discriminator_loss_grads, generator_gan_loss, generator_gan_loss_grads,
    perturbation_hinge, total_generator_objective, LossWeights, PerturbationBudget,
};
use crate::networks::{check_image_size, init_networks, ArchConfig, Discriminator, Generator};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{seeded, stream, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weights: LossWeights,
    pub budget: PerturbationBudget,
    pub seed: u64,
    pub image_size: (usize, usize),
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 0.001,
            epochs: 200,
            weights: LossWeights::default(),
            budget: PerturbationBudget::default(),
            seed: 0,
            image_size: (512, 512),
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Argument, "batch_size must be positive");
        }
        if self.epochs == 0 {
            bail!(Argument, "epochs must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            bail!(Argument, "learning_rate must be positive, got {}", self.learning_rate);
        }
        self.weights.validate()?;
        self.budget.validate()?;
        check_image_size(self.image_size)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }
}

/// Losses of one step, or their sample-weighted mean over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_adv: f64,
    pub l_gan: f64,
    pub l_pert: f64,
    pub total: f64,
    pub l_disc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossRecord,
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_generator: Adam,
    pub opt_discriminator: Adam,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    shuffle: SeededRng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (generator, discriminator) = init_networks(config.seed, config.image_size, config.arch)?;
        Ok(TrainState {
            opt_generator: Adam::new(config.adam(), &generator.params),
            opt_discriminator: Adam::new(config.adam(), &discriminator.params),
            generator,
            discriminator,
            epoch: 0,
            history: Vec::new(),
            shuffle: seeded(config.seed, stream::SHUFFLE),
        })
    }
}

/// One training example: an image and the index of its class watermark.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a Image,
    pub watermark: usize,
}

pub fn clamp_add(x: &Image, pert: &Tensor) -> (Image, Vec<bool>) {
    let mut data = Vec::with_capacity(x.data.len());
    let mut inside = Vec::with_capacity(x.data.len());
    for (&v, &p) in x.data.iter().zip(&pert.data) {
        let s = v + p;
        inside.push((0.0..=1.0).contains(&s));
        data.push(s.clamp(0.0, 1.0));
    }
    (Image { height: x.height, width: x.width, data, source_path: None }, inside)
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training { loss: String::from(name) })
    }
}

pub struct Trainer<'e, E: LatentEncoder + ?Sized> {
    pub config: TrainConfig,
    pub state: TrainState,
    pub watermarks: Vec<Watermark>,
    encoder: &'e E,
    targets: Vec<LatentCode>,
}

impl<'e, E: LatentEncoder + ?Sized> Trainer<'e, E> {
    /// Fresh trainer; the watermark latents are computed once here.
    pub fn new(config: TrainConfig, watermarks: Vec<Watermark>, encoder: &'e E) -> Result<Self> {
        let targets = watermarks.iter().map(|m| encoder.encode(&m.to_image())).collect::<Result<Vec<_>>>()?;
        Self::with_targets(config, watermarks, encoder, targets)
    }

    /// Fresh trainer with precomputed watermark latents (one per watermark).
    pub fn with_targets(
        config: TrainConfig,
        watermarks: Vec<Watermark>,
        encoder: &'e E,
        targets: Vec<LatentCode>,
    ) -> Result<Self> {
        let state = TrainState::new(&config)?;
        if watermarks.is_empty() || targets.len() != watermarks.len() {
            bail!(Argument, "need one latent target per watermark ({} vs {})", targets.len(), watermarks.len());
        }
        for m in &watermarks {
            if m.dims() != config.image_size {
                bail!(Shape, "watermark {:?} is {:?}, config wants {:?}", m.text, m.dims(), config.image_size);
            }
        }
        Ok(Trainer { config, state, watermarks, encoder, targets })
    }

    pub fn targets(&self) -> &[LatentCode] {
        &self.targets
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &[Sample<'_>]) -> Result<LossRecord> {
        if batch.is_empty() {
            bail!(Argument, "empty batch");
        }
        for s in batch {
            if s.image.dims() != self.config.image_size {
                bail!(Shape, "batch image {:?} does not match config {:?}", s.image.dims(), self.config.image_size);
            }
            if s.watermark >= self.watermarks.len() {
                bail!(Argument, "watermark index {} out of range", s.watermark);
            }
        }
        let b = batch.len() as f64;
        let weights = self.config.weights;
        let budget = self.config.budget;

        let mut g_tapes = Vec::with_capacity(batch.len());
        let mut perts = Vec::with_capacity(batch.len());
        let mut adv = Vec::with_capacity(batch.len());
        for s in batch {
            let (pert, tape) = self.state.generator.forward_taped(s.image, &self.watermarks[s.watermark])?;
            adv.push(clamp_add(s.image, &pert));
            perts.push(pert);
            g_tapes.push(tape);
        }

        // discriminator: real vs detached adversarial
        let d = &self.state.discriminator;
        let mut real = Vec::with_capacity(batch.len());
        let mut fake = Vec::with_capacity(batch.len());
        for (s, (x_adv, _)) in batch.iter().zip(&adv) {
            real.push(d.logit_taped(&s.image.to_signed_tensor())?);
            fake.push(d.logit_taped(&x_adv.to_signed_tensor())?);
        }
        let p_real: Vec<f64> = real.iter().map(|(z, _)| crate::networks::sigmoid(*z)).collect();
        let p_fake: Vec<f64> = fake.iter().map(|(z, _)| crate::networks::sigmoid(*z)).collect();
        let l_disc = finite("discriminator", discriminator_loss(&p_real, &p_fake))?;
        let (g_real, g_fake) = discriminator_loss_grads(&p_real, &p_fake);
        let mut d_grads = d.params.zero_grads();
        for (((_, tape), p), g) in real.into_iter().zip(&p_real).zip(&g_real) {
            d.backward(tape, g * p * (1.0 - p), Some(&mut d_grads));
        }
        for (((_, tape), p), g) in fake.into_iter().zip(&p_fake).zip(&g_fake) {
            d.backward(tape, g * p * (1.0 - p), Some(&mut d_grads));
        }
        if !d_grads.all_finite() {
            return Err(Error::Training { loss: String::from("discriminator") });
        }
        self.state.opt_discriminator.step(&mut self.state.discriminator.params, &d_grads);

        // generator against the updated discriminator
        let d = &self.state.discriminator;
        let mut fooled = Vec::with_capacity(batch.len());
        for (x_adv, _) in &adv {
            fooled.push(d.logit_taped(&x_adv.to_signed_tensor())?);
        }
        let p_fooled: Vec<f64> = fooled.iter().map(|(z, _)| crate::networks::sigmoid(*z)).collect();
        let l_gan = finite("gan", generator_gan_loss(&p_fooled))?;
        let gan_grads = generator_gan_loss_grads(&p_fooled);

        let mut g_grads: Grads = self.state.generator.params.zero_grads();
        let (mut l_adv, mut l_pert) = (0.0, 0.0);
        for (i, ((((s, (x_adv, inside)), pert), tape), (_, d_tape))) in
            batch.iter().zip(&adv).zip(&perts).zip(g_tapes).zip(fooled).enumerate()
        {
            let mut d_x = Tensor::zeros(pert.channels, pert.height, pert.width);
            if weights.alpha != 0.0 {
                let p = p_fooled[i];
                let d_logit = weights.alpha * gan_grads[i] * p * (1.0 - p);
                // the discriminator sees 2x - 1
                let d_signed = d.backward(d_tape, d_logit, None);
                for (a, g) in d_x.data.iter_mut().zip(&d_signed.data) {
                    *a += 2.0 * g;
                }
            }
            let (dist, d_adv) = adversarial_term(self.encoder, x_adv, &self.targets[s.watermark])?;
            l_adv += dist / b;
            for (a, g) in d_x.data.iter_mut().zip(&d_adv.data) {
                *a += g / b;
            }
            let (hinge, d_hinge) = perturbation_hinge(pert, &self.watermarks[s.watermark], &budget)?;
            l_pert += hinge / b;

            let mut d_pert = d_x;
            for (k, v) in d_pert.data.iter_mut().enumerate() {
                if !inside[k] {
                    *v = 0.0;
                }
                *v += weights.beta * d_hinge.data[k] / b;
            }
            self.state.generator.backward(tape, d_pert, &mut g_grads);
        }
        finite("adversarial", l_adv)?;
        finite("perturbation", l_pert)?;
        let total = finite("total", total_generator_objective(l_adv, l_gan, l_pert, &weights))?;
        if !g_grads.all_finite() {
            return Err(Error::Training { loss: String::from("total") });
        }
        self.state.opt_generator.step(&mut self.state.generator.params, &g_grads);

        Ok(LossRecord { l_adv, l_gan, l_pert, total, l_disc })
    }

    /// One pass over `data` in a seeded shuffled order.
    pub fn run_epoch(&mut self, data: &[Sample<'_>]) -> Result<EpochRecord> {
        if data.is_empty() {
            bail!(Insufficient, "training set is empty");
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.state.shuffle);
        let mut sum = LossRecord::default();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&i| data[i]).collect();
            let r = self.train_step(&batch)?;
            let k = chunk.len() as f64;
            sum.l_adv += k * r.l_adv;
            sum.l_gan += k * r.l_gan;
            sum.l_pert += k * r.l_pert;
            sum.l_disc += k * r.l_disc;
        }
        // sample-weighted, so a short final batch does not dominate
        let n = data.len() as f64;
        let (l_adv, l_gan, l_pert) = (sum.l_adv / n, sum.l_gan / n, sum.l_pert / n);
        self.state.epoch += 1;
        let record = EpochRecord {
            epoch: self.state.epoch,
            losses: LossRecord {
                l_adv,
                l_gan,
                l_pert,
                total: total_generator_objective(l_adv, l_gan, l_pert, &self.config.weights),
                l_disc: sum.l_disc / n,
            },
        };
        self.state.history.push(record);
        Ok(record)
    }

    /// Runs the configured number of epochs, reporting each epoch record.
    pub fn train(&mut self, data: &[Sample<'_>], mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while self.state.epoch < self.config.epochs {
            let record = self.run_epoch(data)?;
            on_epoch(&record);
        }
        Ok(())
    }
}

/// Number of optimizer steps per epoch for `n` samples.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}
