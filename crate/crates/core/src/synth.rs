//! Procedural stand-ins for natural images: smooth color gradients, a few
//! soft-edged blobs and a little fine texture. Used to fit the toy decoder
//! and to build desk-scale training sets.

use alloc::vec;

use rand::Rng;

use crate::image::{Image, CHANNELS};
use crate::rng::{seeded, standard_normal, stream};

pub fn natural_image(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = seeded(seed, stream::SYNTHETIC);
    let n = height * width;
    let mut data = vec![0.0; CHANNELS * n];
    let tau = core::f64::consts::TAU;

    for c in 0..CHANNELS {
        let base: f64 = rng.random_range(0.25..0.75);
        let waves: [(f64, f64, f64, f64); 3] = core::array::from_fn(|_| {
            (
                rng.random_range(-2.5..2.5),
                rng.random_range(-2.5..2.5),
                rng.random_range(0.0..tau),
                rng.random_range(0.03..0.15),
            )
        });
        for y in 0..height {
            let v = y as f64 / height as f64;
            for x in 0..width {
                let u = x as f64 / width as f64;
                let mut s = base;
                for &(fx, fy, phase, amp) in &waves {
                    s += amp * libm::sin(tau * (fx * u + fy * v) + phase);
                }
                data[c * n + y * width + x] = s;
            }
        }
    }

    let blobs = rng.random_range(2..6);
    for _ in 0..blobs {
        let cy: f64 = rng.random_range(0.0..1.0);
        let cx: f64 = rng.random_range(0.0..1.0);
        let ry: f64 = rng.random_range(0.08..0.35);
        let rx: f64 = rng.random_range(0.08..0.35);
        let color: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.0..1.0));
        let opacity: f64 = rng.random_range(0.4..0.9);
        for y in 0..height {
            let dy = (y as f64 / height as f64 - cy) / ry;
            for x in 0..width {
                let dx = (x as f64 / width as f64 - cx) / rx;
                let r2 = dx * dx + dy * dy;
                // soft edge over roughly 10% of the radius
                let a = opacity * (1.0 - smoothstep(0.8, 1.2, r2));
                if a > 0.0 {
                    for (c, col) in color.iter().enumerate() {
                        let p = &mut data[c * n + y * width + x];
                        *p = (1.0 - a) * *p + a * col;
                    }
                }
            }
        }
    }

    // short oriented brush strokes
    let strokes = height * width / 24;
    for _ in 0..strokes {
        let cy: f64 = rng.random_range(0.0..height as f64);
        let cx: f64 = rng.random_range(0.0..width as f64);
        let angle: f64 = rng.random_range(0.0..core::f64::consts::PI);
        let len: f64 = rng.random_range(2.0..6.0);
        let shade: f64 = rng.random_range(-0.12..0.12);
        let tint: [f64; 3] = core::array::from_fn(|_| rng.random_range(-0.04..0.04));
        let (dy, dx) = (libm::sin(angle), libm::cos(angle));
        let steps = (2.0 * len) as usize + 1;
        for s in 0..steps {
            let t = s as f64 / 2.0 - len / 2.0;
            let (y, x) = (libm::round(cy + t * dy), libm::round(cx + t * dx));
            if y < 0.0 || x < 0.0 || y >= height as f64 || x >= width as f64 {
                continue;
            }
            let i = y as usize * width + x as usize;
            for (c, tt) in tint.iter().enumerate() {
                data[c * n + i] += 0.5 * (shade + tt);
            }
        }
    }

    let grain: f64 = rng.random_range(0.01..0.04);
    for v in data.iter_mut() {
        *v = (*v + grain * standard_normal(&mut rng)).clamp(0.0, 1.0);
    }
    Image { height, width, data, source_path: None }
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_valid_distinct_and_reproducible() {
        let a = natural_image(32, 48, 1);
        assert!(a.is_in_range());
        assert_eq!(a, natural_image(32, 48, 1));
        assert_ne!(a, natural_image(32, 48, 2));
        let mean = a.data.iter().sum::<f64>() / a.data.len() as f64;
        assert!(mean > 0.05 && mean < 0.95);
    }
}
