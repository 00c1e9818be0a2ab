//! Trainer behaviour on tiny configurations.

use wmcloak_core::latent::LatentEncoder;
use wmcloak_core::losses::total_generator_objective;
use wmcloak_core::synth::natural_image;
use wmcloak_core::{
    render_watermark, ArchConfig, Image, LossWeights, RenderParams, Sample, ToyEncoder, TrainConfig, Trainer, Watermark,
};

const SIZE: (usize, usize) = (32, 32);

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        epochs,
        image_size: SIZE,
        arch: ArchConfig { generator_width: 4, discriminator_width: 2 },
        seed: 17,
        ..Default::default()
    }
}

fn marks() -> Vec<Watermark> {
    ["AB", "Z9"].iter().map(|t| render_watermark(t, SIZE.0, SIZE.1, RenderParams::default()).unwrap()).collect()
}

fn images(n: usize) -> Vec<Image> {
    (0..n).map(|i| natural_image(SIZE.0, SIZE.1, 40 + i as u64)).collect()
}

fn samples(imgs: &[Image]) -> Vec<Sample<'_>> {
    imgs.iter().enumerate().map(|(i, x)| Sample { image: x, watermark: i % 2 }).collect()
}

#[test]
fn encoder_is_frozen_across_training() {
    let enc = ToyEncoder::new(5);
    let before = enc.checksum();
    let imgs = images(5);
    let mut tr = Trainer::new(config(3), marks(), &enc).unwrap();
    tr.train(&samples(&imgs), |_| {}).unwrap();
    assert_eq!(enc.checksum(), before);
    assert!(enc.calls() > 0);
}

#[test]
fn recorded_total_matches_its_parts() {
    let enc = ToyEncoder::new(5);
    let imgs = images(5);
    let cfg = TrainConfig { weights: LossWeights { alpha: 0.7, beta: 3.0 }, budget: wmcloak_core::PerturbationBudget { c: 1e-3, w: 4.0 }, ..config(2) };
    let mut tr = Trainer::new(cfg.clone(), marks(), &enc).unwrap();
    let data = samples(&imgs);
    for chunk in data.chunks(2) {
        let r = tr.train_step(chunk).unwrap();
        assert!((r.total - total_generator_objective(r.l_adv, r.l_gan, r.l_pert, &cfg.weights)).abs() < 1e-6);
    }
    tr.train(&data, |e| {
        let l = e.losses;
        assert!((l.total - (l.l_adv + 0.7 * l.l_gan + 3.0 * l.l_pert)).abs() < 1e-6);
    })
    .unwrap();
    assert_eq!(tr.state.history.len(), 2);
}

#[test]
fn training_is_deterministic() {
    let enc = ToyEncoder::new(5);
    let imgs = images(4);
    let run = || {
        let mut tr = Trainer::new(config(3), marks(), &enc).unwrap();
        tr.train(&samples(&imgs), |_| {}).unwrap();
        (tr.state.generator.params, tr.state.discriminator.params, tr.state.history)
    };
    assert_eq!(run(), run());
}

#[test]
fn one_generator_serves_several_watermarks() {
    let enc = ToyEncoder::new(5);
    let imgs = images(6);
    let mut tr = Trainer::new(config(4), marks(), &enc).unwrap();
    tr.train(&samples(&imgs), |_| {}).unwrap();
    let x = natural_image(SIZE.0, SIZE.1, 999);
    let ms = marks();
    let a = tr.state.generator.forward(&x, &ms[0]).unwrap();
    let b = tr.state.generator.forward(&x, &ms[1]).unwrap();
    let diff: f64 = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).sum();
    assert!(diff > 0.0);
}

/// Generator parameters after three steps, optionally with a perturbed
/// discriminator. Adam's first step is sign-only, hence several steps.
fn generator_after_steps(alpha: f64, scramble: bool) -> wmcloak_core::layers::ParamSet {
    let enc = ToyEncoder::new(5);
    let imgs = images(3);
    let cfg = TrainConfig { weights: LossWeights { alpha, beta: 10.0 }, ..config(1) };
    let mut tr = Trainer::new(cfg, marks(), &enc).unwrap();
    if scramble {
        for t in &mut tr.state.discriminator.params.tensors {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v += 0.05 * ((i % 7) as f64 - 3.0);
            }
        }
    }
    for _ in 0..3 {
        tr.train_step(&samples(&imgs)).unwrap();
    }
    tr.state.generator.params
}

#[test]
fn without_gan_term_generator_ignores_discriminator() {
    assert!(generator_after_steps(0.0, false) == generator_after_steps(0.0, true));
    assert!(generator_after_steps(1.0, false) != generator_after_steps(1.0, true));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let enc = ToyEncoder::new(5);
    let wrong = natural_image(64, 64, 1);
    let mut tr = Trainer::new(config(1), marks(), &enc).unwrap();
    assert!(tr.train_step(&[Sample { image: &wrong, watermark: 0 }]).is_err());
    let x = natural_image(SIZE.0, SIZE.1, 1);
    assert!(tr.train_step(&[Sample { image: &x, watermark: 2 }]).is_err());
    assert!(tr.run_epoch(&[]).is_err());
}
