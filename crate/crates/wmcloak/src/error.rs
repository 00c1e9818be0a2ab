use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] wmcloak_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Decode { path: PathBuf, source: image::ImageError },
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Ingestion(String),
    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
    #[error("checkpoint {} failed integrity check: {msg}", path.display())]
    Integrity { path: PathBuf, msg: String },
    #[error("imitation backend failed: {msg}\n--- backend stderr ---\n{stderr}")]
    Backend { msg: String, stderr: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}
