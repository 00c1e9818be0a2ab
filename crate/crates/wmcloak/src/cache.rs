//! On-disk cache of watermark latents `ε(m)`, keyed by encoder checksum and
//! mask. The directory comes from `WMCLOAK_CACHE`; without it nothing is
//! cached.

use std::path::{Path, PathBuf};

use wmcloak_core::{LatentCode, LatentEncoder, Tensor, Watermark};

use crate::checkpoint::sha256_hex;
use crate::error::{io_err, Result};

pub const CACHE_ENV: &str = "WMCLOAK_CACHE";

pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

pub fn cache_key<E: LatentEncoder + ?Sized>(enc: &E, m: &Watermark) -> String {
    let mut bytes = Vec::with_capacity(24 + 8 * m.mask.len());
    bytes.extend_from_slice(&enc.checksum().to_le_bytes());
    bytes.extend_from_slice(&(m.height as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.width as u64).to_le_bytes());
    bytes.extend(m.mask.iter().map(|&v| (v > 0.5) as u8));
    sha256_hex(&bytes)
}

fn encode_blob(z: &LatentCode) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * z.data.len());
    for d in [z.channels, z.height, z.width] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &z.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_blob(bytes: &[u8]) -> Option<LatentCode> {
    let header: Vec<usize> = bytes.get(..24)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let (c, h, w) = (header[0], header[1], header[2]);
    let body = &bytes[24..];
    if body.len() != 8 * c.checked_mul(h)?.checked_mul(w)? {
        return None;
    }
    let data = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Some(Tensor::from_vec(c, h, w, data))
}

/// `ε(m)`, read from `dir` when present and written there otherwise.
/// Unreadable or malformed entries are recomputed and overwritten.
pub fn watermark_latent<E: LatentEncoder + ?Sized>(enc: &E, m: &Watermark, dir: Option<&Path>) -> Result<LatentCode> {
    let Some(dir) = dir else {
        return Ok(enc.encode(&m.to_image())?);
    };
    let path = dir.join(format!("{}.latent", cache_key(enc, m)));
    if let Some(z) = std::fs::read(&path).ok().and_then(|b| decode_blob(&b)) {
        return Ok(z);
    }
    let z = enc.encode(&m.to_image())?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    std::fs::write(&path, encode_blob(&z)).map_err(io_err(&path))?;
    Ok(z)
}
