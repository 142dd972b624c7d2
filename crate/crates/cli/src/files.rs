//! File helpers shared by the commands: atomic writes, hashing, data loading.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use refine_core::store::{self, make_pairs, PairManifest};
use refine_core::{EmbeddingTable, PairedDataset};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Writes `bytes` to a temp file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::data_at(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::data_at(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::data_at(path, e))?;
    tmp.persist(path).map_err(|e| CliError::data_at(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> CliResult<()> {
    let mut bytes = if pretty {
        serde_json::to_vec_pretty(value)
    } else {
        serde_json::to_vec(value)
    }
    .map_err(CliError::data)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::data_at(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn load_table(path: &Path) -> CliResult<EmbeddingTable> {
    store::load_table(path).map_err(|e| CliError::data_at(path, e))
}

pub fn save_table(path: &Path, table: &EmbeddingTable) -> CliResult<()> {
    let bytes = store::encode_table(table).map_err(|e| CliError::data_at(path, e))?;
    write_atomic(path, &bytes)
}

pub fn load_manifest(path: &Path) -> CliResult<PairManifest> {
    PairManifest::load(path).map_err(|e| CliError::data_at(path, e))
}

/// Where one paired split lives on disk.
#[derive(Debug, Clone)]
pub struct DataPaths {
    pub images: PathBuf,
    pub texts: PathBuf,
    /// Without a manifest, rows pair up by position.
    pub manifest: Option<PathBuf>,
    pub caption_index: usize,
}

impl DataPaths {
    pub fn files(&self) -> Vec<&Path> {
        let mut v = vec![self.images.as_path(), self.texts.as_path()];
        if let Some(m) = &self.manifest {
            v.push(m);
        }
        v
    }

    pub fn load(&self) -> CliResult<PairedDataset> {
        let images = load_table(&self.images)?;
        let texts = load_table(&self.texts)?;
        let manifest = match &self.manifest {
            Some(p) => load_manifest(p)?,
            None => {
                if images.count() != texts.count() {
                    return Err(CliError::data(format!(
                        "{} has {} rows but {} has {}; pass a manifest",
                        self.images.display(),
                        images.count(),
                        self.texts.display(),
                        texts.count()
                    )));
                }
                PairManifest::aligned(&images, &texts)
            }
        };
        make_pairs(&images, &texts, &manifest, self.caption_index).map_err(|e| {
            let at = self.manifest.as_deref().unwrap_or(&self.images);
            CliError::data_at(at, e)
        })
    }
}
