//! `root/<class>/*.{png,jpg}` ingestion with one rendered watermark per class.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wmcloak_core::{render_watermark, Image, RenderParams, Watermark};

use crate::error::{io_err, Error, Result};
use crate::io::{list_images, read_image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub path: PathBuf,
    pub class: String,
    /// Watermark id: the watermark text.
    pub watermark_id: String,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub entries: Vec<Entry>,
    pub watermarks: BTreeMap<String, Watermark>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Watermarks in id order, the order a trainer indexes them by.
    pub fn watermark_list(&self) -> Vec<Watermark> {
        self.watermarks.values().cloned().collect()
    }

    pub fn watermark_index(&self, id: &str) -> Option<usize> {
        self.watermarks.keys().position(|k| k == id)
    }

    /// Loads the images of one split, paired with their watermark index.
    pub fn load(&self, split: Split, size: (usize, usize)) -> Result<Vec<(Image, usize)>> {
        self.split(split)
            .map(|e| {
                let idx = self.watermark_index(&e.watermark_id).expect("entries resolve by construction");
                Ok((read_image(&e.path, size)?, idx))
            })
            .collect()
    }
}

/// Reads a JSON object `class name -> watermark text`.
pub fn read_mapping(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Indexes every class directory under `root`. The first `split_per_class`
/// images of each class (lexicographic order) are tagged train, the rest
/// eval. Watermarks are rendered at `size` = `(H, W)`.
pub fn build_dataset(
    root: &Path,
    mapping: &BTreeMap<String, String>,
    split_per_class: usize,
    size: (usize, usize),
    params: RenderParams,
) -> Result<DatasetIndex> {
    let mut classes = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if path.is_dir() {
            classes.push(path);
        }
    }
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Ingestion(format!("no class directories under {}", root.display())));
    }

    let mut entries = Vec::new();
    let mut watermarks = BTreeMap::new();
    for dir in classes {
        let class = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let text = mapping
            .get(&class)
            .ok_or_else(|| Error::Ingestion(format!("class `{class}` has no watermark text in the mapping")))?;
        let files = list_images(&dir)?;
        if files.is_empty() {
            return Err(Error::Ingestion(format!("class `{class}` contains no images")));
        }
        if !watermarks.contains_key(text) {
            watermarks.insert(text.clone(), render_watermark(text, size.0, size.1, params)?);
        }
        for (i, path) in files.into_iter().enumerate() {
            let split = if i < split_per_class { Split::Train } else { Split::Eval };
            entries.push(Entry { path, class: class.clone(), watermark_id: text.clone(), split });
        }
    }
    Ok(DatasetIndex { entries, watermarks })
}
