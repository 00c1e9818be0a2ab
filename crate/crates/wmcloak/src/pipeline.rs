//! Directory-level workflows behind the CLI verbs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use wmcloak_core::cloak::PerturbationStats;
use wmcloak_core::defenses::apply_defense_with;
use wmcloak_core::metrics::{
    embed_features, frechet_distance, mean_psnr, mse, ncc_watermark, precision_recall_knn, psnr_db, ssim,
    FeatureExtractor, GaussianStats, MetricParams, PairRecord, SSIM_SIGMA, SSIM_WINDOW,
};
use wmcloak_core::{
    cloak_image, CloakOptions, DefenseConfig, EpochRecord, Image, ImitationConfig, MetricReport, Psnr, Sample,
    ToyEncoder, ToyImitator, TrainConfig, Trainer, Watermark,
};

use crate::backend::ExternalBackend;
use crate::cache::watermark_latent;
use crate::checkpoint::{config_digest, Checkpoint};
use crate::error::{io_err, Error, Result};
use crate::io::{jpeg_round_trip, list_images, read_image, read_image_native, write_image};

/// Seed for one file, derived from a component seed and the file stem so
/// results do not depend on directory order.
pub fn file_seed(component_seed: u64, stem: &str) -> u64 {
    crate::config::derive_seed(component_seed, stem)
}

fn stem_of(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn read_at(path: &Path, size: Option<(usize, usize)>) -> Result<Image> {
    match size {
        Some(s) => read_image(path, s),
        None => read_image_native(path),
    }
}

/// Trains on in-memory samples `(image, watermark index)`. Watermark latents
/// come from the cache in `cache_dir` when given; one JSON line per epoch
/// goes to `log`.
pub fn train_model(
    config: &TrainConfig,
    watermarks: Vec<Watermark>,
    data: &[(Image, usize)],
    encoder: &ToyEncoder,
    cache_dir: Option<&Path>,
    log: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    if data.is_empty() {
        return Err(Error::Ingestion("no training images".into()));
    }
    let targets = watermarks.iter().map(|m| watermark_latent(encoder, m, cache_dir)).collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::with_targets(config.clone(), watermarks, encoder, targets)?;
    let samples: Vec<Sample<'_>> = data.iter().map(|(image, watermark)| Sample { image, watermark: *watermark }).collect();

    let mut log = log;
    let mut log_err = None;
    trainer.train(&samples, |rec: &EpochRecord| {
        if let (Some(w), None) = (log.as_mut(), log_err.as_ref()) {
            let line = serde_json::to_string(rec).expect("epoch record serializes");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::Io { path: PathBuf::from("<training log>"), source: e });
    }

    let state = trainer.state;
    Ok(Checkpoint {
        generator: state.generator,
        discriminator: state.discriminator,
        epoch: state.epoch,
        config_digest: config_digest(config),
        config: config.clone(),
        encoder_seed: encoder.seed,
        watermarks: trainer.watermarks,
        loss_history: state.history,
    })
}

/// [`train_model`] with the log written to `log_path` (truncated first).
pub fn train_with_log(
    config: &TrainConfig,
    watermarks: Vec<Watermark>,
    data: &[(Image, usize)],
    encoder: &ToyEncoder,
    cache_dir: Option<&Path>,
    log_path: &Path,
) -> Result<Checkpoint> {
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(log_path).map_err(io_err(log_path))?;
    let mut w = BufWriter::new(file);
    let cp = train_model(config, watermarks, data, encoder, cache_dir, Some(&mut w))?;
    w.flush().map_err(io_err(log_path))?;
    Ok(cp)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub file: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CloakEntry {
    /// Input file name; the output is `<stem>.png` in the output directory.
    pub file: String,
    pub output: String,
    pub stats: PerturbationStats,
    pub psnr: Psnr,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CloakSummary {
    pub watermark_id: String,
    pub entries: Vec<CloakEntry>,
    pub failures: Vec<Failure>,
    /// Mean of the per-image PSNRs; absent for an empty batch.
    pub aggregate_psnr: Option<Psnr>,
}

fn file_name(path: &Path) -> String {
    path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Cloaks every image in `input_dir`; per-file failures are collected.
pub fn cloak_batch(
    cp: &Checkpoint,
    input_dir: &Path,
    watermark_id: &str,
    output_dir: &Path,
    opts: &CloakOptions,
) -> Result<CloakSummary> {
    let m = cp.watermark(watermark_id)?;
    std::fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for path in list_images(input_dir)? {
        let out_name = format!("{}.png", stem_of(&path));
        let outcome = read_image(&path, cp.config.image_size).and_then(|x| {
            let r = cloak_image(&cp.generator, &x, m, watermark_id, opts)?;
            write_image(&r.adversarial, &output_dir.join(&out_name))?;
            Ok((r.stats, psnr_db(&x, &r.adversarial)?))
        });
        match outcome {
            Ok((stats, psnr)) => entries.push(CloakEntry { file: file_name(&path), output: out_name, stats, psnr }),
            Err(e) => failures.push(Failure { file: file_name(&path), error: e.to_string() }),
        }
    }
    let aggregate_psnr = mean_psnr(&entries.iter().map(|e| e.psnr).collect::<Vec<_>>());
    Ok(CloakSummary { watermark_id: watermark_id.to_string(), entries, failures, aggregate_psnr })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformEntry {
    pub file: String,
    pub output: String,
    /// PSNR between the (resized) input and the output, when shapes agree.
    pub psnr: Option<Psnr>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformSummary {
    pub entries: Vec<TransformEntry>,
    pub failures: Vec<Failure>,
}

fn transform_dir(
    input_dir: &Path,
    output_dir: &Path,
    size: Option<(usize, usize)>,
    mut f: impl FnMut(&str, &Image) -> Result<Image>,
) -> Result<TransformSummary> {
    std::fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for path in list_images(input_dir)? {
        let stem = stem_of(&path);
        let out_name = format!("{stem}.png");
        let outcome = read_at(&path, size).and_then(|x| {
            let y = f(&stem, &x)?;
            write_image(&y, &output_dir.join(&out_name))?;
            Ok(psnr_db(&x, &y).ok())
        });
        match outcome {
            Ok(psnr) => entries.push(TransformEntry { file: file_name(&path), output: out_name, psnr }),
            Err(e) => failures.push(Failure { file: file_name(&path), error: e.to_string() }),
        }
    }
    Ok(TransformSummary { entries, failures })
}

/// One image through a defense; JPEG uses the platform codec.
pub fn apply_defense(x: &Image, cfg: &DefenseConfig, seed: u64) -> Result<Image> {
    let mut jpeg_err = None;
    let out = apply_defense_with(x, cfg, seed, |img, q| {
        jpeg_round_trip(img, q).map_err(|e| {
            let msg = e.to_string();
            jpeg_err = Some(e);
            wmcloak_core::Error::Argument(msg)
        })
    });
    match (out, jpeg_err) {
        (Ok(y), _) => Ok(y),
        (Err(_), Some(e)) => Err(e),
        (Err(e), None) => Err(e.into()),
    }
}

pub fn defend_dir(
    input_dir: &Path,
    output_dir: &Path,
    cfg: &DefenseConfig,
    seed: u64,
    size: Option<(usize, usize)>,
) -> Result<TransformSummary> {
    cfg.validate()?;
    transform_dir(input_dir, output_dir, size, |stem, x| apply_defense(x, cfg, file_seed(seed, stem)))
}

/// Imitation backend: the built-in toy simulator or an external adapter.
pub enum Imitator<'a> {
    Toy(&'a ToyImitator),
    External { backend: &'a ExternalBackend, work_dir: PathBuf },
}

impl Imitator<'_> {
    pub fn imitate(&self, x: &Image, stem: &str, cfg: &ImitationConfig) -> Result<Image> {
        match self {
            Imitator::Toy(t) => Ok(t.simulate(x, cfg)?),
            Imitator::External { backend, work_dir } => backend.run(x, work_dir, stem, cfg),
        }
    }
}

pub fn simulate_dir(
    input_dir: &Path,
    output_dir: &Path,
    imitator: &Imitator<'_>,
    cfg: &ImitationConfig,
    size: Option<(usize, usize)>,
) -> Result<TransformSummary> {
    cfg.validate()?;
    transform_dir(input_dir, output_dir, size, |stem, x| {
        let per_file = ImitationConfig { seed: file_seed(cfg.seed, stem), ..cfg.clone() };
        imitator.imitate(x, stem, &per_file)
    })
}

/// Options for comparing a reference directory with a candidate directory.
pub struct EvaluateOptions<'a> {
    pub size: Option<(usize, usize)>,
    /// Watermark for NCC; without it NCC is not reported.
    pub watermark: Option<&'a Watermark>,
    /// When set, NCC compares imitations of both images (same seed per
    /// pair); otherwise the directories are taken as already-generated images.
    pub imitation: Option<(&'a Imitator<'a>, &'a ImitationConfig)>,
    pub extractor: &'a dyn FeatureExtractor,
    pub knn_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateSummary {
    pub report: Option<MetricReport>,
    pub failures: Vec<Failure>,
}

/// Pairs files by stem and reports MSE / PSNR / SSIM per pair, NCC when a
/// watermark is given, and Fréchet distance and k-NN precision/recall over
/// the whole sets when there are enough images.
pub fn evaluate_dirs(reference: &Path, candidate: &Path, opts: &EvaluateOptions<'_>) -> Result<EvaluateSummary> {
    let cand_files = list_images(candidate)?;
    let mut pairs = Vec::new();
    let mut refs = Vec::new();
    let mut cands = Vec::new();
    let mut failures = Vec::new();
    for path in list_images(reference)? {
        let stem = stem_of(&path);
        let Some(cpath) = cand_files.iter().find(|p| stem_of(p) == stem) else {
            failures.push(Failure { file: file_name(&path), error: "no candidate with this stem".into() });
            continue;
        };
        let outcome = (|| -> Result<(PairRecord, Image, Image)> {
            let a = read_at(&path, opts.size)?;
            let b = read_image(cpath, a.dims())?;
            let ncc = match opts.watermark {
                None => None,
                Some(m) => Some(match opts.imitation {
                    None => ncc_watermark(&a, &b, m)?,
                    Some((imitator, cfg)) => {
                        let per_file = ImitationConfig { seed: file_seed(cfg.seed, &stem), ..cfg.clone() };
                        let ga = imitator.imitate(&a, &format!("{stem}.ref"), &per_file)?;
                        let gb = imitator.imitate(&b, &format!("{stem}.cand"), &per_file)?;
                        ncc_watermark(&ga, &gb, m)?
                    }
                }),
            };
            let rec = PairRecord { name: stem.clone(), mse: mse(&a, &b)?, psnr: psnr_db(&a, &b)?, ssim: ssim(&a, &b)?, ncc };
            Ok((rec, a, b))
        })();
        match outcome {
            Ok((rec, a, b)) => {
                pairs.push(rec);
                refs.push(a);
                cands.push(b);
            }
            Err(e) => failures.push(Failure { file: file_name(&path), error: e.to_string() }),
        }
    }
    if pairs.is_empty() {
        return Ok(EvaluateSummary { report: None, failures });
    }
    let fa = embed_features(&refs, opts.extractor)?;
    let fb = embed_features(&cands, opts.extractor)?;
    let fid = match (GaussianStats::from_features(&fa), GaussianStats::from_features(&fb)) {
        (Ok(a), Ok(b)) => Some(frechet_distance(&a, &b)?),
        _ => None,
    };
    let pr = precision_recall_knn(&fa, &fb, opts.knn_k).ok();
    let params = MetricParams {
        ssim_window: SSIM_WINDOW,
        ssim_sigma: SSIM_SIGMA,
        knn_k: opts.knn_k,
        feature_extractor: opts.extractor.id(),
    };
    Ok(EvaluateSummary { report: Some(MetricReport::new(params, pairs, fid, pr)?), failures })
}
