//! Metrics against brute-force and closed-form references.

use rand::Rng;
use wmcloak_core::metrics::{
    frechet_distance, mse, ncc_watermark, precision_recall_knn, psnr_db, ssim, GaussianStats, Psnr,
};
use wmcloak_core::rng::{seeded, standard_normal};
use wmcloak_core::{Image, RenderParams, Watermark};

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = seeded(seed, 100);
    Image::new(h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn random_mark(h: usize, w: usize, seed: u64) -> Watermark {
    let mut rng = seeded(seed, 101);
    let mut mask: Vec<f64> = (0..h * w).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    mask[0] = 1.0;
    mask[1] = 0.0;
    Watermark::from_mask(h, w, mask, "R".into(), RenderParams::default()).unwrap()
}

#[test]
fn mse_matches_nested_loops() {
    for seed in 0..20 {
        let (a, b) = (random_image(7, 9, seed), random_image(7, 9, seed + 1000));
        let mut sum = 0.0;
        for c in 0..3 {
            for y in 0..7 {
                for x in 0..9 {
                    let d = a.get(c, y, x) - b.get(c, y, x);
                    sum += d * d;
                }
            }
        }
        assert!((mse(&a, &b).unwrap() - sum / (3.0 * 63.0)).abs() < 1e-12);
    }
    assert_eq!(mse(&Image::filled(4, 4, 0.0), &Image::filled(4, 4, 1.0)).unwrap(), 1.0);
}

#[test]
fn psnr_closed_form() {
    assert!((Psnr::from_mse(0.01).db().unwrap() - 20.0).abs() < 1e-12);
    assert!((Psnr::from_mse(0.0037).db().unwrap() - 24.318).abs() < 1e-3);
    let a = random_image(8, 8, 3);
    assert_eq!(psnr_db(&a, &a).unwrap(), Psnr::Identical);
}

#[test]
fn ncc_matches_nested_loops() {
    for seed in 0..20 {
        let (a, b, m) = (random_image(8, 8, seed), random_image(8, 8, seed + 50), random_mark(8, 8, seed));
        let mut d = vec![0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                d[y * 8 + x] = (0..3).map(|c| (b.get(c, y, x) - a.get(c, y, x)).abs()).sum::<f64>() / 3.0;
            }
        }
        let md = d.iter().sum::<f64>() / 64.0;
        let mm = m.mask.iter().sum::<f64>() / 64.0;
        let (mut num, mut dd, mut mmv) = (0.0, 0.0, 0.0);
        for i in 0..64 {
            num += (d[i] - md) * (m.mask[i] - mm);
            dd += (d[i] - md) * (d[i] - md);
            mmv += (m.mask[i] - mm) * (m.mask[i] - mm);
        }
        let expect = num / (dd.sqrt() * mmv.sqrt());
        assert!((ncc_watermark(&a, &b, &m).unwrap() - expect).abs() < 1e-9);
    }
}

#[test]
fn ncc_conventions() {
    let m = random_mark(8, 8, 1);
    let a = random_image(8, 8, 2);
    assert_eq!(ncc_watermark(&a, &a, &m).unwrap(), 0.0);
    // difference exactly shaped like the mask
    let mut b = a.clone();
    for c in 0..3 {
        for i in 0..64 {
            let v = &mut b.data[c * 64 + i];
            *v = if m.mask[i] == 1.0 { (*v + 0.2).min(1.0).max(*v + 0.2 - 1.0) } else { *v };
        }
    }
    let mut exact = Image::filled(8, 8, 0.3);
    for c in 0..3 {
        for i in 0..64 {
            exact.data[c * 64 + i] += 0.5 * m.mask[i];
        }
    }
    assert!((ncc_watermark(&Image::filled(8, 8, 0.3), &exact, &m).unwrap() - 1.0).abs() < 1e-12);
    let flat = Watermark::from_mask(8, 8, vec![1.0; 64], "F".into(), RenderParams::default()).unwrap();
    assert!(ncc_watermark(&a, &b, &flat).is_err());
}

#[test]
fn ssim_constant_patches() {
    let c1 = 0.01f64.powi(2);
    for (p, q) in [(0.3, 0.7), (0.1, 0.1), (0.0, 1.0), (0.5, 0.45)] {
        let expect = (2.0 * p * q + c1) / (p * p + q * q + c1);
        let got = ssim(&Image::filled(16, 12, p), &Image::filled(16, 12, q)).unwrap();
        assert!((got - expect).abs() < 1e-9, "{p} {q}: {got} vs {expect}");
    }
    let exact = (0.42 + c1) / (0.58 + c1);
    assert!((ssim(&Image::filled(11, 11, 0.3), &Image::filled(11, 11, 0.7)).unwrap() - exact).abs() < 1e-9);
    assert!(ssim(&Image::filled(10, 20, 0.3), &Image::filled(10, 20, 0.3)).is_err());
    let a = random_image(20, 20, 4);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

fn cloud(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed, 102);
    (0..n).map(|_| (0..d).map(|j| standard_normal(&mut rng) + if j == 0 { shift } else { 0.0 }).collect()).collect()
}

#[test]
fn frechet_closed_forms() {
    let base = GaussianStats::from_features(&cloud(200, 5, 0.0, 1)).unwrap();
    assert!(frechet_distance(&base, &base).unwrap().abs() < 1e-6);
    let v = [0.5, -1.0, 2.0, 0.0, 0.25];
    let shifted = GaussianStats { mean: base.mean.iter().zip(v).map(|(m, d)| m + d).collect(), cov: base.cov.clone() };
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    assert!((frechet_distance(&base, &shifted).unwrap() - norm2).abs() < 1e-4);

    let mut last = -1.0;
    for (i, shift) in [0.0, 0.5, 1.0, 2.0, 4.0].into_iter().enumerate() {
        let other = GaussianStats::from_features(&cloud(200, 5, shift, 7 + i as u64)).unwrap();
        let fd = frechet_distance(&base, &other).unwrap();
        assert!(fd > last, "shift {shift}: {fd} <= {last}");
        last = fd;
    }
    let wrong = GaussianStats { mean: vec![0.0; 3], cov: vec![0.0; 9] };
    assert!(frechet_distance(&base, &wrong).is_err());
}

fn brute_pr(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> (f64, f64) {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let radius = |set: &[Vec<f64>], i: usize| {
        let mut ds = Vec::new();
        for j in 0..set.len() {
            if j != i {
                ds.push(d2(&set[i], &set[j]));
            }
        }
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ds[k - 1]
    };
    let covered = |manifold: &[Vec<f64>], probe: &[f64]| (0..manifold.len()).any(|i| d2(probe, &manifold[i]) <= radius(manifold, i));
    let p = gen.iter().filter(|g| covered(real, g)).count() as f64 / gen.len() as f64;
    let r = real.iter().filter(|x| covered(gen, x)).count() as f64 / real.len() as f64;
    (p, r)
}

#[test]
fn precision_recall_matches_all_pairs() {
    for seed in 0..10 {
        let real = cloud(12, 3, 0.0, seed);
        let gen = cloud(9, 3, 0.8, seed + 100);
        for k in [1, 3, 5] {
            assert_eq!(precision_recall_knn(&real, &gen, k).unwrap(), brute_pr(&real, &gen, k));
        }
    }
    let real = cloud(10, 2, 0.0, 1);
    assert_eq!(precision_recall_knn(&real, &real, 3).unwrap(), (1.0, 1.0));
    let far = cloud(10, 2, 1e3, 2);
    assert_eq!(precision_recall_knn(&real, &far, 3).unwrap().0, 0.0);
    assert!(precision_recall_knn(&real[..3], &real, 3).is_err());
}
