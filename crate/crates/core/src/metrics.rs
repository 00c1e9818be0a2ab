//! Image-quality and generated-image metrics.
//!
//! MSE / PSNR / SSIM score adversarial examples against their sources. The
//! watermark NCC scores how visibly a watermark shows up in the difference
//! between imitations of the original and of the cloaked image. Fréchet
//! distance and k-NN precision/recall compare feature clouds produced by a
//! pluggable [`FeatureExtractor`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::{Image, Watermark, CHANNELS};
use crate::layers::{self, Conv2d, Op, PadMode, ParamSet};
use crate::rng::{seeded, stream};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
pub const FRECHET_JITTER: f64 = 1e-6;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() || a.data.len() != b.data.len() {
        bail!(Shape, "images differ in shape: {:?} vs {:?}", a.dims(), b.dims());
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// PSNR with peak 1.0. Identical images have no finite PSNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psnr {
    Identical,
    Db(f64),
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Identical
        } else {
            Psnr::Db(10.0 * libm::log10(1.0 / mse))
        }
    }

    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Identical => None,
            Psnr::Db(v) => Some(*v),
        }
    }
}

pub fn psnr_db(a: &Image, b: &Image) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b)?))
}

/// Mean of per-image PSNR values. Identical pairs are left out of the mean;
/// the aggregate is `Identical` only when every pair is identical.
pub fn mean_psnr(values: &[Psnr]) -> Option<Psnr> {
    if values.is_empty() {
        return None;
    }
    let finite: Vec<f64> = values.iter().filter_map(Psnr::db).collect();
    if finite.is_empty() {
        return Some(Psnr::Identical);
    }
    Some(Psnr::Db(finite.iter().sum::<f64>() / finite.len() as f64))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] =
        core::array::from_fn(|i| libm::exp(-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)));
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" Gaussian filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM (Gaussian window 11, sigma 1.5, K1 0.01, K2 0.03, L 1),
/// averaged over all valid window positions and the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        bail!(Argument, "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}");
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let n = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..CHANNELS {
        let pa = &a.data[c * n..(c + 1) * n];
        let pb = &b.data[c * n..(c + 1) * n];
        let prod = |f: &dyn Fn(f64, f64) -> f64| pa.iter().zip(pb).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
        let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
        let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Zero-normalized cross-correlation between the watermark mask and the
/// grayscale absolute difference of two generated images. A constant
/// difference image scores 0.
pub fn ncc_watermark(gen_orig: &Image, gen_adv: &Image, m: &Watermark) -> Result<f64> {
    same_shape(gen_orig, gen_adv)?;
    if gen_orig.dims() != m.dims() {
        bail!(Shape, "watermark {:?} does not match images {:?}", m.dims(), gen_orig.dims());
    }
    let diff = Image {
        height: gen_orig.height,
        width: gen_orig.width,
        data: gen_orig.data.iter().zip(&gen_adv.data).map(|(a, b)| libm::fabs(b - a)).collect(),
        source_path: None,
    }
    .grayscale();
    zero_normalized_correlation(&diff, &m.mask)
}

/// `sum((d - mean d)(m - mean m)) / (||d - mean d|| * ||m - mean m||)`.
pub fn zero_normalized_correlation(d: &[f64], m: &[f64]) -> Result<f64> {
    if d.len() != m.len() || d.is_empty() {
        bail!(Shape, "correlation inputs have lengths {} and {}", d.len(), m.len());
    }
    let n = d.len() as f64;
    let md = d.iter().sum::<f64>() / n;
    let mm = m.iter().sum::<f64>() / n;
    let vm: f64 = m.iter().map(|v| (v - mm) * (v - mm)).sum();
    if vm == 0.0 {
        bail!(Argument, "watermark mask is constant");
    }
    let vd: f64 = d.iter().map(|v| (v - md) * (v - md)).sum();
    if vd == 0.0 {
        return Ok(0.0);
    }
    let cov: f64 = d.iter().zip(m).map(|(a, b)| (a - md) * (b - mm)).sum();
    Ok((cov / (libm::sqrt(vd) * libm::sqrt(vm))).clamp(-1.0, 1.0))
}

/// Maps images to fixed-length feature vectors for distribution metrics.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, img: &Image) -> Result<Vec<f64>>;
}

/// Three strided 3x3 convolutions with ReLU, summarized by per-channel mean
/// and standard deviation of the last feature map.
#[derive(Debug, Clone)]
pub struct ToyFeatureExtractor {
    params: ParamSet,
    ops: Vec<Op>,
    seed: u64,
    channels: usize,
}

impl ToyFeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded(seed, stream::FEATURE_EXTRACTOR);
        let mut params = ParamSet::default();
        let mut ops = Vec::new();
        let mut cin = CHANNELS;
        for (i, cout) in [8, 16, 16].into_iter().enumerate() {
            let name = alloc::format!("feat{i}");
            ops.push(Op::Conv(Conv2d::new_init(&mut params, &name, cin, cout, (3, 3), 2, 1, PadMode::Reflect, &mut rng)));
            ops.push(Op::Relu);
            cin = cout;
        }
        ToyFeatureExtractor { params, ops, seed, channels: cin }
    }
}

impl FeatureExtractor for ToyFeatureExtractor {
    fn id(&self) -> String {
        alloc::format!("toy-conv3-seed{}", self.seed)
    }

    fn dim(&self) -> usize {
        2 * self.channels
    }

    fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        if img.height < 8 || img.width < 8 {
            bail!(Argument, "feature extractor needs at least 8x8 images");
        }
        let fmap = layers::forward(&self.ops, &self.params, img.to_signed_tensor(), None);
        let n = fmap.plane_len() as f64;
        let mut means = Vec::with_capacity(self.channels);
        let mut stds = Vec::with_capacity(self.channels);
        for plane in fmap.data.chunks(fmap.plane_len()) {
            let m = plane.iter().sum::<f64>() / n;
            means.push(m);
            stds.push(libm::sqrt(plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n));
        }
        means.extend(stds);
        Ok(means)
    }
}

/// Mean and covariance of a feature cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance of `feats` (at least two points).
    pub fn from_features(feats: &[Vec<f64>]) -> Result<Self> {
        if feats.len() < 2 {
            bail!(Insufficient, "need at least 2 feature vectors, got {}", feats.len());
        }
        let d = feats[0].len();
        if feats.iter().any(|f| f.len() != d) {
            bail!(Shape, "feature vectors differ in length");
        }
        let n = feats.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let mut cov = vec![0.0; d * d];
        for f in feats {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (f[i] - mean[i]) * (f[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= n - 1.0);
        Ok(GaussianStats { mean, cov })
    }
}

pub fn embed_features<F: FeatureExtractor + ?Sized>(images: &[Image], extractor: &F) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|x| extractor.embed(x)).collect()
}

pub fn embed_set<F: FeatureExtractor + ?Sized>(images: &[Image], extractor: &F) -> Result<GaussianStats> {
    GaussianStats::from_features(&embed_features(images, extractor)?)
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|v| libm::sqrt(v.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with `1e-6`
/// added to both covariance diagonals. The trace term is evaluated through
/// the symmetric product `S_a^(1/2) S_b S_a^(1/2)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        bail!(Shape, "embedding dimensions differ: {} vs {}", d, b.dim());
    }
    let mut sa = DMatrix::from_row_slice(d, d, &a.cov);
    let mut sb = DMatrix::from_row_slice(d, d, &b.cov);
    for i in 0..d {
        sa[(i, i)] += FRECHET_JITTER;
        sb[(i, i)] += FRECHET_JITTER;
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = psd_sqrt(sa.clone());
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| libm::sqrt(v.max(0.0))).sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its k-th nearest neighbor in the same set.
fn knn_radii(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> =
                points.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, q)| sq_dist(p, q)).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &[Vec<f64>], radii: &[f64], probes: &[Vec<f64>]) -> f64 {
    let inside = probes
        .iter()
        .filter(|p| manifold.iter().zip(radii).any(|(c, &r)| sq_dist(p, c) <= r))
        .count();
    inside as f64 / probes.len() as f64
}

/// Improved precision and recall: each set's manifold is the union of balls
/// reaching every point's k-th nearest neighbor. Precision is the fraction
/// of generated points inside the real manifold; recall the fraction of real
/// points inside the generated manifold.
pub fn precision_recall_knn(real: &[Vec<f64>], generated: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        bail!(Argument, "k must be positive");
    }
    if real.len() < k + 1 || generated.len() < k + 1 {
        bail!(Insufficient, "need at least {} points per set, got {} and {}", k + 1, real.len(), generated.len());
    }
    let d = real[0].len();
    if real.iter().chain(generated).any(|p| p.len() != d) {
        bail!(Shape, "feature vectors differ in length");
    }
    let precision = coverage(real, &knn_radii(real, k), generated);
    let recall = coverage(generated, &knn_radii(generated, k), real);
    Ok((precision, recall))
}

/// Scores of one (reference, candidate) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub name: String,
    pub mse: f64,
    pub psnr: Psnr,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ncc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub knn_k: usize,
    pub feature_extractor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mse: f64,
    pub psnr: Psnr,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ncc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub params: MetricParams,
    pub pairs: Vec<PairRecord>,
    pub aggregates: Aggregates,
}

impl MetricReport {
    /// Builds the report; per-pair means are recomputed from `pairs`.
    pub fn new(params: MetricParams, pairs: Vec<PairRecord>, fid: Option<f64>, pr: Option<(f64, f64)>) -> Result<Self> {
        if pairs.is_empty() {
            bail!(Insufficient, "no image pairs to report");
        }
        let n = pairs.len() as f64;
        let psnrs: Vec<Psnr> = pairs.iter().map(|p| p.psnr).collect();
        let nccs: Vec<f64> = pairs.iter().filter_map(|p| p.ncc).collect();
        let aggregates = Aggregates {
            mse: pairs.iter().map(|p| p.mse).sum::<f64>() / n,
            psnr: mean_psnr(&psnrs).expect("nonempty"),
            ssim: pairs.iter().map(|p| p.ssim).sum::<f64>() / n,
            ncc: (!nccs.is_empty()).then(|| nccs.iter().sum::<f64>() / nccs.len() as f64),
            fid,
            precision: pr.map(|p| p.0),
            recall: pr.map(|p| p.1),
        };
        Ok(MetricReport { params, pairs, aggregates })
    }

    /// One table row: `MSE | PSNR | SSIM | NCC | FID | Prec.`
    pub fn table_row(&self, label: &str) -> String {
        let a = &self.aggregates;
        let opt = |v: Option<f64>, digits: usize| match v {
            Some(x) => alloc::format!("{x:.digits$}"),
            None => String::from("-"),
        };
        let psnr = match a.psnr {
            Psnr::Identical => String::from("inf"),
            Psnr::Db(v) => alloc::format!("{v:.1}"),
        };
        alloc::format!(
            "| {label} | {:.4} | {psnr} | {:.3} | {} | {} | {} |",
            a.mse,
            a.ssim,
            opt(a.ncc, 2),
            opt(a.fid, 2),
            opt(a.precision, 3)
        )
    }

    pub const TABLE_HEADER: &'static str = "| Method | MSE | PSNR | SSIM | NCC | FID | Prec. |\n|---|---|---|---|---|---|---|";
}
