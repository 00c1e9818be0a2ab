//! Randomized properties of losses, metrics, defenses and the toy backend.

use std::sync::OnceLock;

use proptest::prelude::*;
use wmcloak_core::defenses::{randomized_smoothing, total_variation, tvm_with_trace};
use wmcloak_core::losses::{perturbation_hinge, perturbation_loss, weighted_rms};
use wmcloak_core::metrics::{frechet_distance, ncc_watermark, psnr_db, ssim, GaussianStats, Psnr};
use wmcloak_core::synth::natural_image;
use wmcloak_core::{render_watermark, Image, ImitationConfig, PerturbationBudget, RenderParams, Tensor, ToyImitator, Watermark};

fn imitator() -> &'static ToyImitator {
    static SIM: OnceLock<ToyImitator> = OnceLock::new();
    SIM.get_or_init(|| ToyImitator::new(11))
}

fn mark(h: usize, w: usize, bits: &[bool]) -> Watermark {
    let mut mask: Vec<f64> = (0..h * w).map(|i| bits[i % bits.len()] as u8 as f64).collect();
    mask[0] = 1.0;
    mask[h * w - 1] = 0.0;
    Watermark::from_mask(h, w, mask, "P".into(), RenderParams::default()).unwrap()
}

fn image_from(h: usize, w: usize, vals: &[f64]) -> Image {
    Image::new(h, w, (0..3 * h * w).map(|i| vals[i % vals.len()]).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hinge_is_zero_inside_budget(
        vals in prop::collection::vec(-1.0f64..1.0, 192),
        bits in prop::collection::vec(any::<bool>(), 1..64),
        frac in 0.0f64..=1.0,
    ) {
        let m = mark(8, 8, &bits);
        let p = Tensor::from_vec(3, 8, 8, vals);
        let budget = PerturbationBudget { c: 10.0 / 255.0, w: 4.0 };
        let rms = weighted_rms(&p, &m, budget.w).unwrap();
        prop_assume!(rms > 0.0);
        let inside = p.map(|v| v * frac * budget.c / rms);
        prop_assert_eq!(perturbation_loss(&[inside], &[&m], &budget).unwrap(), 0.0);
    }

    #[test]
    fn hinge_grows_linearly_past_budget(
        vals in prop::collection::vec(-1.0f64..1.0, 192),
        bits in prop::collection::vec(any::<bool>(), 1..64),
        delta in 1e-4f64..0.5,
    ) {
        let m = mark(8, 8, &bits);
        let p = Tensor::from_vec(3, 8, 8, vals);
        let budget = PerturbationBudget { c: 10.0 / 255.0, w: 4.0 };
        let rms = weighted_rms(&p, &m, budget.w).unwrap();
        prop_assume!(rms > 0.0);
        let scaled = p.map(|v| v * (budget.c + delta) / rms);
        let (loss, _) = perturbation_hinge(&scaled, &m, &budget).unwrap();
        prop_assert!((loss - delta).abs() < 1e-6, "{} vs {}", loss, delta);
    }

    #[test]
    fn hinge_monotone_in_w(
        vals in prop::collection::vec(-0.5f64..0.5, 192),
        bits in prop::collection::vec(any::<bool>(), 1..64),
        w1 in 0.0f64..8.0,
        dw in 0.0f64..8.0,
    ) {
        let m = mark(8, 8, &bits);
        let p = Tensor::from_vec(3, 8, 8, vals);
        let lo = PerturbationBudget { c: 1.0 / 255.0, w: w1 };
        let hi = PerturbationBudget { c: 1.0 / 255.0, w: w1 + dw };
        let a = perturbation_loss(&[p.clone()], &[&m], &lo).unwrap();
        let b = perturbation_loss(&[p], &[&m], &hi).unwrap();
        prop_assert!(b >= a - 1e-12, "{} < {}", b, a);
    }

    #[test]
    fn ncc_ignores_constant_offsets(
        a in prop::collection::vec(0.2f64..0.8, 192),
        b in prop::collection::vec(0.2f64..0.8, 192),
        bits in prop::collection::vec(any::<bool>(), 1..64),
        shift in 0.0f64..0.2,
    ) {
        let (x, y, m) = (image_from(8, 8, &a), image_from(8, 8, &b), mark(8, 8, &bits));
        // raise y where it already exceeds x, lower it elsewhere, so |y - x| grows by `shift` everywhere
        let mut z = y.clone();
        for (zi, (xi, yi)) in z.data.iter_mut().zip(x.data.iter().zip(&y.data)) {
            *zi = if yi >= xi { yi + shift } else { yi - shift };
        }
        let base = ncc_watermark(&x, &y, &m);
        let moved = ncc_watermark(&x, &z, &m);
        if let (Ok(u), Ok(v)) = (base, moved) {
            prop_assert!((u - v).abs() < 1e-9, "{} vs {}", u, v);
        }
    }

    #[test]
    fn ssim_is_symmetric(a in prop::collection::vec(0.0f64..1.0, 1..50), b in prop::collection::vec(0.0f64..1.0, 1..50)) {
        let (x, y) = (image_from(12, 12, &a), image_from(12, 12, &b));
        let (s1, s2) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12);
    }

    #[test]
    fn frechet_is_symmetric(pts_a in prop::collection::vec(-3.0f64..3.0, 30), pts_b in prop::collection::vec(-3.0f64..3.0, 30)) {
        let cloud = |v: &[f64]| v.chunks(3).map(|c| c.to_vec()).collect::<Vec<_>>();
        let a = GaussianStats::from_features(&cloud(&pts_a)).unwrap();
        let b = GaussianStats::from_features(&cloud(&pts_b)).unwrap();
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab.abs()), "{} vs {}", ab, ba);
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn defenses_are_deterministic(seed in any::<u64>(), img_seed in 0u64..1000) {
        let x = natural_image(16, 16, img_seed);
        prop_assert_eq!(randomized_smoothing(&x, 0.05, seed), randomized_smoothing(&x, 0.05, seed));
        prop_assert_eq!(tvm_with_trace(&x, 0.02, 5), tvm_with_trace(&x, 0.02, 5));
    }

    #[test]
    fn tvm_descends_and_reduces_variation(img_seed in 0u64..1000, noise_seed in any::<u64>(), lambda in 0.005f64..0.1) {
        let noisy = randomized_smoothing(&natural_image(16, 16, img_seed), 0.1, noise_seed);
        let (out, trace) = tvm_with_trace(&noisy, lambda, 20);
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0]), "objective rose: {:?}", trace);
        prop_assert!(total_variation(&out) <= total_variation(&noisy));
        prop_assert!(out.is_in_range());
    }

    #[test]
    fn watermark_render_is_binary_and_pure(text in "[A-Z0-9_]{1,6}") {
        let a = render_watermark(&text, 64, 128, RenderParams::default()).unwrap();
        let b = render_watermark(&text, 64, 128, RenderParams::default()).unwrap();
        prop_assert!(a.mask.iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(a.density() > 0.0);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn psnr_falls_with_noise_amplitude() {
    let x = Image::filled(32, 32, 0.5);
    let pattern: Vec<f64> = (0..x.data.len()).map(|i| if (i * 7919) % 13 < 6 { 1.0 } else { -1.0 }).collect();
    let mut last = f64::INFINITY;
    for k in 1..=20 {
        let amp = 0.01 * k as f64;
        let y = Image::new(32, 32, x.data.iter().zip(&pattern).map(|(v, s)| v + amp * s).collect()).unwrap();
        let Psnr::Db(db) = psnr_db(&x, &y).unwrap() else { panic!("identical at amplitude {amp}") };
        assert!(db < last, "amplitude {amp}: {db} >= {last}");
        last = db;
    }
}

#[test]
fn imitation_departs_further_with_strength() {
    let sim = imitator();
    for img_seed in [5, 77, 901, 4242] {
        let x = natural_image(64, 64, img_seed);
        let mut last = f64::INFINITY;
        for k in 0..10 {
            let cfg = ImitationConfig { strength: k as f64 / 10.0, seed: img_seed % 7, prompt: None };
            let db = psnr_db(&x, &sim.simulate(&x, &cfg).unwrap()).unwrap().db().unwrap_or(f64::INFINITY);
            assert!(db <= last, "image {img_seed}, strength {}: {db} > {last}", cfg.strength);
            last = db;
        }
    }
}

#[test]
fn imitation_is_deterministic_and_prompt_blind() {
    let sim = imitator();
    let x = natural_image(64, 64, 8);
    let cfg = ImitationConfig { strength: 0.3, seed: 9, prompt: None };
    let with_prompt = ImitationConfig { prompt: Some("A painting".into()), ..cfg.clone() };
    assert_eq!(sim.simulate(&x, &cfg).unwrap(), sim.simulate(&x, &with_prompt).unwrap());
}
