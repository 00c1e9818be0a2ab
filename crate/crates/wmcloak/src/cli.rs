//! Command-line surface: one binary, six verbs, one resolved config per run.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use wmcloak_core::metrics::ToyFeatureExtractor;
use wmcloak_core::{render_watermark, DefenseKind, LossRecord, ToyEncoder, ToyImitator};

use crate::backend::ExternalBackend;
use crate::cache::cache_dir_from_env;
use crate::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{build_dataset, read_mapping, Split};
use crate::error::{Error, Result};
use crate::io::{list_images, read_image_native, write_mask};
use crate::pipeline::{cloak_batch, defend_dir, evaluate_dirs, simulate_dir, train_with_log, EvaluateOptions, Imitator};

pub const RESULT_FILE: &str = "result.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Parser)]
#[command(name = "wmcloak", version, about = "Train and apply watermark cloaking generators")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Render a text watermark mask to PNG.
    RenderWatermark {
        #[arg(long)]
        text: String,
        /// `N` for N x N, or `HxW`.
        #[arg(long, value_parser = parse_size)]
        size: Option<(usize, usize)>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a generator on `<data>/<class>/*` with a class -> text mapping.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        mapping: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Cloak every image in a directory with a trained checkpoint.
    Cloak {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Watermark id (its text); optional when the checkpoint has one.
        #[arg(long)]
        watermark: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a reference directory with a candidate directory.
    Evaluate {
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        candidate: Option<PathBuf>,
        /// Watermark text for NCC.
        #[arg(long)]
        watermark: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Apply a purification defense to every image in a directory.
    Defend {
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the imitation backend on every image in a directory.
    Simulate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Verb {
    pub fn common(&self) -> &Common {
        match self {
            Verb::RenderWatermark { common, .. }
            | Verb::Train { common, .. }
            | Verb::Cloak { common, .. }
            | Verb::Evaluate { common, .. }
            | Verb::Defend { common, .. }
            | Verb::Simulate { common, .. } => common,
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; every field is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for every artifact of the run.
    #[arg(long)]
    pub out: PathBuf,
    /// Print the machine-readable result on stdout.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub encoder_seed: Option<u64>,
    #[arg(long, value_parser = parse_size)]
    pub image_size: Option<(usize, usize)>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Watermark-region weight of the perturbation loss.
    #[arg(long = "w")]
    pub w: Option<f64>,
    /// Perturbation bound, pixel-range units.
    #[arg(long = "c")]
    pub c: Option<f64>,
    #[arg(long)]
    pub generator_width: Option<usize>,
    #[arg(long)]
    pub discriminator_width: Option<usize>,
    #[arg(long)]
    pub split_per_class: Option<usize>,
    #[arg(long)]
    pub linf_bound: Option<f64>,
    #[arg(long, value_parser = parse_defense)]
    pub defense: Option<DefenseKind>,
    #[arg(long)]
    pub jpeg_quality: Option<u8>,
    #[arg(long)]
    pub rs_sigma: Option<f64>,
    #[arg(long)]
    pub tvm_lambda: Option<f64>,
    #[arg(long)]
    pub tvm_iters: Option<usize>,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// External imitation adapter executable.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub knn_k: Option<usize>,
}

pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad size `{s}`: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

fn parse_defense(s: &str) -> std::result::Result<DefenseKind, String> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase())).map_err(|_| format!("unknown defense `{s}` (jpeg, rs, tvm)"))
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *dst = v.clone();
            }
        }
        set(&mut cfg.seed, &self.seed);
        set(&mut cfg.encoder_seed, &self.encoder_seed);
        if self.image_size.is_some() {
            cfg.image_size = self.image_size;
        }
        let t = &mut cfg.train;
        set(&mut t.epochs, &self.epochs);
        set(&mut t.batch_size, &self.batch_size);
        set(&mut t.learning_rate, &self.learning_rate);
        set(&mut t.weights.alpha, &self.alpha);
        set(&mut t.weights.beta, &self.beta);
        set(&mut t.budget.w, &self.w);
        set(&mut t.budget.c, &self.c);
        set(&mut t.arch.generator_width, &self.generator_width);
        set(&mut t.arch.discriminator_width, &self.discriminator_width);
        set(&mut t.split_per_class, &self.split_per_class);
        if self.linf_bound.is_some() {
            cfg.cloak.linf_bound = self.linf_bound;
        }
        let d = &mut cfg.defense;
        set(&mut d.kind, &self.defense);
        set(&mut d.jpeg_quality, &self.jpeg_quality);
        set(&mut d.rs_sigma, &self.rs_sigma);
        set(&mut d.tvm_lambda, &self.tvm_lambda);
        set(&mut d.tvm_iters, &self.tvm_iters);
        set(&mut cfg.imitation.strength, &self.strength);
        if self.prompt.is_some() {
            cfg.imitation.prompt = self.prompt.clone();
        }
        if let Some(a) = &self.adapter {
            cfg.imitation.adapter = Some(vec![a.display().to_string()]);
        }
        set(&mut cfg.metrics.knn_k, &self.knn_k);
    }
}

/// Loads the config file, applies flag overrides and validates the result.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    common.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Config(format!("missing {what} path (flag or `paths.{what}`)")))
}

fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag.clone();
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("result serializes")
}

fn load_cp(path: &Path, size: Option<(usize, usize)>) -> Result<crate::checkpoint::Checkpoint> {
    let loaded = match size {
        Some(s) => load_checkpoint_for(path, s),
        None => load_checkpoint(path),
    };
    loaded.map_err(|e| match e {
        Error::Io { path, source } => Error::Checkpoint { path, msg: format!("cannot read: {source}") },
        e => e,
    })
}

/// Output of one verb: the JSON result and a one-line human summary.
pub struct Outcome {
    pub result: Value,
    pub summary: String,
}

/// Runs a parsed command. The resolved config and the result are written to
/// the `--out` directory; paths inside the result are relative to it.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let common = cli.verb.common();
    let mut cfg = resolve_config(common)?;
    let out = common.out.as_path();

    let outcome = match &cli.verb {
        Verb::RenderWatermark { text, size, .. } => {
            let (h, w) = size.or(cfg.image_size).unwrap_or(crate::config::DEFAULT_IMAGE_SIZE);
            cfg.image_size = Some((h, w));
            let m = render_watermark(text, h, w, cfg.watermark)?;
            let name = format!("{text}.png");
            write_mask(&m, &out.join(&name))?;
            Outcome {
                summary: format!("wrote {name} ({h}x{w}, density {:.4})", m.density()),
                result: json!({ "mask": name, "text": text, "height": h, "width": w, "density": m.density() }),
            }
        }
        Verb::Train { data, mapping, .. } => {
            set_path(&mut cfg.paths.data, data);
            set_path(&mut cfg.paths.mapping, mapping);
            let root = require(&cfg.paths.data, "data")?;
            let mapping = read_mapping(&require(&cfg.paths.mapping, "mapping")?)?;
            let size = cfg.train_image_size();
            let index = build_dataset(&root, &mapping, cfg.train.split_per_class, size, cfg.watermark)?;
            let data = index.load(Split::Train, size)?;
            let encoder = ToyEncoder::new(cfg.encoder_seed);
            cfg.write_resolved(out)?;
            let cp = train_with_log(
                &cfg.train_config(),
                index.watermark_list(),
                &data,
                &encoder,
                cache_dir_from_env().as_deref(),
                &out.join(TRAIN_LOG),
            )?;
            save_checkpoint(&cp, &out.join(CHECKPOINT_DIR))?;
            let last: LossRecord = cp.loss_history.last().map(|r| r.losses).unwrap_or_default();
            Outcome {
                summary: format!("trained {} epochs on {} images; final l_adv {:.4}", cp.epoch, data.len(), last.l_adv),
                result: json!({
                    "checkpoint": CHECKPOINT_DIR,
                    "log": TRAIN_LOG,
                    "epochs": cp.epoch,
                    "train_images": data.len(),
                    "eval_images": index.split(Split::Eval).count(),
                    "watermark_ids": cp.watermark_ids(),
                    "final_losses": last,
                }),
            }
        }
        Verb::Cloak { checkpoint, input, watermark, .. } => {
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.input, input);
            let cp = load_cp(&require(&cfg.paths.checkpoint, "checkpoint")?, cfg.image_size)?;
            let input = require(&cfg.paths.input, "input")?;
            let id = match watermark {
                Some(id) => id.clone(),
                None => match cp.watermark_ids().as_slice() {
                    [only] => only.clone(),
                    ids => return Err(Error::Config(format!("--watermark is required; checkpoint has {ids:?}"))),
                },
            };
            let summary = cloak_batch(&cp, &input, &id, &out.join(IMAGES_DIR), &cfg.cloak)?;
            Outcome {
                summary: format!(
                    "cloaked {} images ({} failed), mean PSNR {}",
                    summary.entries.len(),
                    summary.failures.len(),
                    fmt_psnr(summary.aggregate_psnr)
                ),
                result: json!({ "output_dir": IMAGES_DIR, "summary": to_value(&summary) }),
            }
        }
        Verb::Evaluate { reference, candidate, watermark, .. } => {
            set_path(&mut cfg.paths.reference, reference);
            set_path(&mut cfg.paths.candidate, candidate);
            let reference = require(&cfg.paths.reference, "reference")?;
            let candidate = require(&cfg.paths.candidate, "candidate")?;
            let size = match cfg.image_size {
                Some(s) => Some(s),
                None => list_images(&reference)?.first().map(|p| read_image_native(p).map(|i| i.dims())).transpose()?,
            };
            let mark = match (watermark, size) {
                (Some(text), Some((h, w))) => Some(render_watermark(text, h, w, cfg.watermark)?),
                _ => None,
            };
            let toy;
            let backend;
            let imitator = match &cfg.imitation.adapter {
                Some(argv) => {
                    backend = ExternalBackend::from_argv(argv)?;
                    Imitator::External { backend: &backend, work_dir: out.join("adapter_work") }
                }
                None => {
                    toy = ToyImitator::new(cfg.encoder_seed);
                    Imitator::Toy(&toy)
                }
            };
            let icfg = cfg.imitation_config();
            let extractor = ToyFeatureExtractor::new(cfg.metrics.feature_seed);
            let opts = EvaluateOptions {
                size,
                watermark: mark.as_ref(),
                imitation: cfg.metrics.imitate_for_ncc.then_some((&imitator, &icfg)),
                extractor: &extractor,
                knn_k: cfg.metrics.knn_k,
            };
            let summary = evaluate_dirs(&reference, &candidate, &opts)?;
            let row = summary.report.as_ref().map(|r| r.table_row("candidate"));
            Outcome {
                summary: match &row {
                    Some(row) => format!("{}\n{row}", wmcloak_core::MetricReport::TABLE_HEADER),
                    None => format!("no comparable pairs ({} failures)", summary.failures.len()),
                },
                result: json!({ "summary": to_value(&summary), "table_row": row }),
            }
        }
        Verb::Defend { input, .. } => {
            set_path(&mut cfg.paths.input, input);
            let input = require(&cfg.paths.input, "input")?;
            let summary = defend_dir(&input, &out.join(IMAGES_DIR), &cfg.defense, cfg.defense_seed(), cfg.image_size)?;
            Outcome {
                summary: format!("defended {} images ({} failed)", summary.entries.len(), summary.failures.len()),
                result: json!({ "defense": cfg.defense, "output_dir": IMAGES_DIR, "summary": to_value(&summary) }),
            }
        }
        Verb::Simulate { input, .. } => {
            set_path(&mut cfg.paths.input, input);
            let input = require(&cfg.paths.input, "input")?;
            let icfg = cfg.imitation_config();
            let toy;
            let backend;
            let imitator = match &cfg.imitation.adapter {
                Some(argv) => {
                    backend = ExternalBackend::from_argv(argv)?;
                    Imitator::External { backend: &backend, work_dir: out.join("adapter_work") }
                }
                None => {
                    toy = ToyImitator::new(cfg.encoder_seed);
                    Imitator::Toy(&toy)
                }
            };
            let summary = simulate_dir(&input, &out.join(IMAGES_DIR), &imitator, &icfg, cfg.image_size)?;
            Outcome {
                summary: format!("imitated {} images ({} failed)", summary.entries.len(), summary.failures.len()),
                result: json!({ "output_dir": IMAGES_DIR, "summary": to_value(&summary) }),
            }
        }
    };

    cfg.write_resolved(out)?;
    let p = out.join(RESULT_FILE);
    let mut text = serde_json::to_string_pretty(&outcome.result).expect("result serializes");
    text.push('\n');
    std::fs::write(&p, text).map_err(crate::error::io_err(&p))?;
    Ok(outcome)
}

fn fmt_psnr(p: Option<wmcloak_core::Psnr>) -> String {
    match p {
        None => "n/a".into(),
        Some(wmcloak_core::Psnr::Identical) => "identical".into(),
        Some(wmcloak_core::Psnr::Db(v)) => format!("{v:.2} dB"),
    }
}
