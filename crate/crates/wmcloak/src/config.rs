//! The single JSON run document. Every field has a default, unknown keys are
//! rejected, and all randomness derives from the root `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wmcloak_core::{
    ArchConfig, CloakOptions, DefenseConfig, ImitationConfig, LossWeights, PerturbationBudget, RenderParams,
    TrainConfig,
};

use crate::error::{io_err, Error, Result};

pub const RESOLVED_CONFIG: &str = "run_config.json";
pub const DEFAULT_IMAGE_SIZE: (usize, usize) = (512, 512);

/// First eight bytes of `SHA-256(seed_le || label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weights: LossWeights,
    pub budget: PerturbationBudget,
    pub arch: ArchConfig,
    /// Images per class used for training; the rest are held out.
    pub split_per_class: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            weights: t.weights,
            budget: t.budget,
            arch: t.arch,
            split_per_class: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImitationSection {
    pub strength: f64,
    pub prompt: Option<String>,
    /// External adapter argv; the toy simulator is used when absent.
    pub adapter: Option<Vec<String>>,
}

impl Default for ImitationSection {
    fn default() -> Self {
        ImitationSection { strength: ImitationConfig::default().strength, prompt: None, adapter: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub knn_k: usize,
    pub feature_seed: u64,
    /// Imitate both images of a pair before computing NCC.
    pub imitate_for_ncc: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { knn_k: 3, feature_seed: 0, imitate_for_ncc: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub mapping: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub candidate: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder_seed: u64,
    /// `[H, W]`; when absent, training uses 512x512 and other verbs use the
    /// checkpoint's size or each file's own size.
    pub image_size: Option<(usize, usize)>,
    pub watermark: RenderParams,
    pub train: TrainSection,
    pub cloak: CloakOptions,
    pub defense: DefenseConfig,
    pub imitation: ImitationSection,
    pub metrics: MetricsSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            encoder_seed: 0,
            image_size: None,
            watermark: RenderParams::default(),
            train: TrainSection::default(),
            cloak: CloakOptions::default(),
            defense: DefenseConfig::default(),
            imitation: ImitationSection::default(),
            metrics: MetricsSection::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(RunConfig::default());
        }
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn field(name: &'static str) -> impl Fn(wmcloak_core::Error) -> Error {
            move |e| Error::Config(format!("{name}: {e}"))
        }
        self.train_config().validate().map_err(field("train"))?;
        self.cloak.validate().map_err(field("cloak"))?;
        self.defense.validate().map_err(field("defense"))?;
        self.imitation_config().validate().map_err(field("imitation"))?;
        if self.metrics.knn_k == 0 {
            return Err(Error::Config("metrics.knn_k: must be positive".into()));
        }
        if let Some((h, w)) = self.image_size {
            if h == 0 || w == 0 {
                return Err(Error::Config("image_size: dimensions must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn train_image_size(&self) -> (usize, usize) {
        self.image_size.unwrap_or(DEFAULT_IMAGE_SIZE)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            weights: t.weights,
            budget: t.budget,
            seed: derive_seed(self.seed, "train"),
            image_size: self.train_image_size(),
            arch: t.arch,
        }
    }

    pub fn imitation_config(&self) -> ImitationConfig {
        ImitationConfig {
            strength: self.imitation.strength,
            seed: derive_seed(self.seed, "imitation"),
            prompt: self.imitation.prompt.clone(),
        }
    }

    pub fn defense_seed(&self) -> u64 {
        derive_seed(self.seed, "defense")
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes the resolved config to `dir/run_config.json`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join(RESOLVED_CONFIG);
        std::fs::write(&p, self.to_pretty_json()).map_err(io_err(&p))?;
        Ok(p)
    }
}
