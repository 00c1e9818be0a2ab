//! Checkpoint directory: `manifest.json` plus one little-endian `f64` blob
//! per network. The manifest carries a SHA-256 of the training config, of
//! each blob and of its own body.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wmcloak_core::layers::{ParamSet, ParamTensor};
use wmcloak_core::{render_watermark, Discriminator, EpochRecord, Generator, RenderParams, TrainConfig, Watermark};

use crate::error::{io_err, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const GENERATOR_BLOB: &str = "generator.bin";
pub const DISCRIMINATOR_BLOB: &str = "discriminator.bin";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_digest(config: &TrainConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub epoch: usize,
    pub config: TrainConfig,
    pub config_digest: String,
    pub encoder_seed: u64,
    pub watermarks: Vec<Watermark>,
    pub loss_history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn watermark_ids(&self) -> Vec<String> {
        self.watermarks.iter().map(|m| m.text.clone()).collect()
    }

    pub fn watermark(&self, id: &str) -> Result<&Watermark> {
        Ok(wmcloak_core::cloak::find_watermark(&self.watermarks, id)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobSpec {
    file: String,
    sha256: String,
    tensors: Vec<TensorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WatermarkSpec {
    id: String,
    render: RenderParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerSpec {
    algorithm: String,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestBody {
    format_version: u32,
    epoch: usize,
    config: TrainConfig,
    config_digest: String,
    encoder: EncoderSpec,
    optimizer: OptimizerSpec,
    watermarks: Vec<WatermarkSpec>,
    generator: BlobSpec,
    discriminator: BlobSpec,
    loss_history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Toy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(flatten)]
    body: ManifestBody,
    manifest_sha256: String,
}

fn body_digest(body: &ManifestBody) -> String {
    sha256_hex(&serde_json::to_vec(body).expect("manifest serializes"))
}

fn encode_params(params: &ParamSet) -> (Vec<u8>, Vec<TensorSpec>) {
    let mut bytes = Vec::with_capacity(8 * params.num_scalars());
    let mut specs = Vec::new();
    for t in &params.tensors {
        specs.push(TensorSpec { name: t.name.clone(), shape: t.shape.clone() });
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, specs)
}

fn decode_params(path: &Path, bytes: &[u8], specs: &[TensorSpec]) -> Result<ParamSet> {
    let total: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
    if bytes.len() != 8 * total {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("blob holds {} bytes, manifest describes {} values", bytes.len(), total),
        });
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = specs
        .iter()
        .map(|s| ParamTensor {
            name: s.name.clone(),
            shape: s.shape.clone(),
            data: values.by_ref().take(s.shape.iter().product()).collect(),
        })
        .collect();
    Ok(ParamSet { tensors })
}

pub fn save_checkpoint(cp: &Checkpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (g_bytes, g_specs) = encode_params(&cp.generator.params);
    let (d_bytes, d_specs) = encode_params(&cp.discriminator.params);
    let adam = cp.config.adam();
    let body = ManifestBody {
        format_version: FORMAT_VERSION,
        epoch: cp.epoch,
        config: cp.config.clone(),
        config_digest: cp.config_digest.clone(),
        encoder: EncoderSpec { kind: EncoderKind::Toy, seed: cp.encoder_seed },
        optimizer: OptimizerSpec {
            algorithm: "adam".into(),
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        },
        watermarks: cp.watermarks.iter().map(|m| WatermarkSpec { id: m.text.clone(), render: m.params }).collect(),
        generator: BlobSpec { file: GENERATOR_BLOB.into(), sha256: sha256_hex(&g_bytes), tensors: g_specs },
        discriminator: BlobSpec { file: DISCRIMINATOR_BLOB.into(), sha256: sha256_hex(&d_bytes), tensors: d_specs },
        loss_history: cp.loss_history.clone(),
    };
    let manifest = Manifest { manifest_sha256: body_digest(&body), body };
    for (name, bytes) in [(GENERATOR_BLOB, &g_bytes), (DISCRIMINATOR_BLOB, &d_bytes)] {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    let p = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&p, text).map_err(io_err(&p))
}

fn integrity(path: &Path, msg: impl Into<String>) -> Error {
    Error::Integrity { path: path.to_path_buf(), msg: msg.into() }
}

fn read_blob(dir: &Path, spec: &BlobSpec) -> Result<(PathBuf, Vec<u8>)> {
    let p = dir.join(&spec.file);
    let bytes = std::fs::read(&p).map_err(io_err(&p))?;
    if sha256_hex(&bytes) != spec.sha256 {
        return Err(integrity(&p, "weights digest mismatch"));
    }
    Ok((p, bytes))
}

/// Loads and verifies a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| integrity(&mpath, format!("unreadable manifest: {e}")))?;
    let body = manifest.body;
    if body_digest(&body) != manifest.manifest_sha256 {
        return Err(integrity(&mpath, "manifest digest mismatch"));
    }
    if body.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            path: mpath,
            msg: format!("format version {} is not supported", body.format_version),
        });
    }
    if config_digest(&body.config) != body.config_digest {
        return Err(integrity(&mpath, "config digest mismatch"));
    }
    if body.loss_history.len() != body.epoch {
        return Err(integrity(&mpath, "loss history length differs from epoch"));
    }
    let cfg = &body.config;
    let (gp, g_bytes) = read_blob(dir, &body.generator)?;
    let (dp, d_bytes) = read_blob(dir, &body.discriminator)?;
    let generator =
        Generator::with_params(cfg.image_size, cfg.arch, decode_params(&gp, &g_bytes, &body.generator.tensors)?)?;
    let discriminator = Discriminator::with_params(
        cfg.image_size,
        cfg.arch,
        decode_params(&dp, &d_bytes, &body.discriminator.tensors)?,
    )?;
    let watermarks = body
        .watermarks
        .iter()
        .map(|w| render_watermark(&w.id, cfg.image_size.0, cfg.image_size.1, w.render))
        .collect::<wmcloak_core::Result<Vec<_>>>()?;
    Ok(Checkpoint {
        generator,
        discriminator,
        epoch: body.epoch,
        config: body.config,
        config_digest: body.config_digest,
        encoder_seed: body.encoder.seed,
        watermarks,
        loss_history: body.loss_history,
    })
}

/// Loads a checkpoint and insists it was trained at `image_size`.
pub fn load_checkpoint_for(dir: &Path, image_size: (usize, usize)) -> Result<Checkpoint> {
    let cp = load_checkpoint(dir)?;
    if cp.config.image_size != image_size {
        return Err(wmcloak_core::Error::Shape(format!(
            "checkpoint was trained at {:?}, requested {:?}",
            cp.config.image_size, image_size
        ))
        .into());
    }
    Ok(cp)
}
