//! Cached embedding tables, pairing manifests and class-prompt tables.
//!
//! # `EMB1` layout
//!
//! All integers little-endian.
//!
//! | offset | size        | field                                   |
//! |--------|-------------|-----------------------------------------|
//! | 0      | 4           | magic `EMB1`                            |
//! | 4      | 4           | `u32` version (= 1)                     |
//! | 8      | 8           | `u64` row count N                       |
//! | 16     | 4           | `u32` dim d                             |
//! | 20     | 4           | `u32` dtype code (0 = float32)          |
//! | 24     | 4·N·d       | row-major `f32` data block              |
//! | …      | to EOF      | UTF-8 JSON trailer `{"ids": [...], "crc32": n}` |
//!
//! The CRC32 covers the data block bytes only. Embeddings are stored raw;
//! normalization happens model-side.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EMB1";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic bytes {found:?} at offset 0 (expected \"EMB1\")")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),
    #[error("file truncated at offset {offset}: expected at least {expected} bytes")]
    TruncatedFile { offset: u64, expected: u64 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("duplicate id {id:?} at row {row}")]
    DuplicateId { row: usize, id: String },
    #[error("checksum mismatch: trailer records {expected:#010x}, data block is {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("table must contain at least one row")]
    EmptyTable,
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("malformed trailer: {0}")]
    BadTrailer(#[source] serde_json::Error),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("unmatched ids: {}", .0.join(", "))]
    UnmatchedId(Vec<String>),
    #[error("text id {0:?} is paired with more than one image")]
    DuplicatePairing(String),
    #[error("caption index {index} out of range for image {image:?} ({available} captions)")]
    CaptionIndex {
        image: String,
        index: usize,
        available: usize,
    },
    #[error("class prompt table needs at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("malformed manifest: {0}")]
    BadManifest(#[source] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// N×d matrix of raw `f32` embeddings with one stable id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
}

impl EmbeddingTable {
    /// Builds a table, checking every invariant (finite values, unique ids, N ≥ 1).
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        if ids.is_empty() {
            return Err(StoreError::EmptyTable);
        }
        if data.len() != ids.len() * dim {
            return Err(StoreError::ShapeMismatch(format!(
                "{} ids × dim {} needs {} values, got {}",
                ids.len(),
                dim,
                ids.len() * dim,
                data.len()
            )));
        }
        check_finite(&data, dim)?;
        check_unique(&ids)?;
        Ok(Self { dim, data, ids })
    }

    /// Builds a table from an `f64` matrix (values are rounded to `f32`).
    pub fn from_array(rows: &Array2<f64>, ids: Vec<String>) -> Result<Self, StoreError> {
        let data = rows.iter().map(|&v| v as f32).collect();
        Self::new(rows.ncols(), data, ids)
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row index of every id.
    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    /// Rows widened to `f64`.
    pub fn to_f64(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.count(), self.dim), |(i, j)| self.data[i * self.dim + j] as f64)
    }

    /// New table holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self, StoreError> {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            ids.push(self.ids[r].clone());
        }
        Self::new(self.dim, data, ids)
    }
}

fn check_finite(data: &[f32], dim: usize) -> Result<(), StoreError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(p) => Err(StoreError::NonFiniteValue {
            row: p / dim,
            col: p % dim,
        }),
        None => Ok(()),
    }
}

fn check_unique(ids: &[String]) -> Result<(), StoreError> {
    let mut seen = HashSet::with_capacity(ids.len());
    for (row, id) in ids.iter().enumerate() {
        if !seen.insert(id.as_str()) {
            return Err(StoreError::DuplicateId {
                row,
                id: id.clone(),
            });
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    ids: Vec<String>,
    crc32: u32,
}

/// Total byte length of an encoded table before the trailer.
pub fn data_end(count: usize, dim: usize) -> usize {
    HEADER_LEN + 4 * count * dim
}

/// Serializes a table to `EMB1` bytes.
pub fn encode_table(table: &EmbeddingTable) -> Result<Vec<u8>, StoreError> {
    if table.count() == 0 {
        return Err(StoreError::EmptyTable);
    }
    let mut out = Vec::with_capacity(data_end(table.count(), table.dim) + 16 * table.count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(table.count() as u64).to_le_bytes());
    out.extend_from_slice(&(table.dim as u32).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for v in &table.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc32 = crc32fast::hash(&out[HEADER_LEN..]);
    let trailer = Trailer {
        ids: table.ids.clone(),
        crc32,
    };
    serde_json::to_writer(&mut out, &trailer).map_err(StoreError::BadTrailer)?;
    Ok(out)
}

/// Parses and validates `EMB1` bytes.
pub fn decode_table(bytes: &[u8]) -> Result<EmbeddingTable, StoreError> {
    if bytes.len() < 4 {
        return Err(StoreError::TruncatedFile {
            offset: bytes.len() as u64,
            expected: HEADER_LEN as u64,
        });
    }
    if bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic {
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::TruncatedFile {
            offset: bytes.len() as u64,
            expected: HEADER_LEN as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u32_at(16) as usize;
    let dtype = u32_at(20);
    if dtype != DTYPE_F32 {
        return Err(StoreError::UnsupportedDtype(dtype));
    }
    if count == 0 {
        return Err(StoreError::EmptyTable);
    }
    if dim == 0 {
        return Err(StoreError::ZeroDim);
    }
    let expected = (count as u128) * (dim as u128) * 4 + HEADER_LEN as u128;
    if (bytes.len() as u128) < expected {
        return Err(StoreError::TruncatedFile {
            offset: bytes.len() as u64,
            expected: expected.min(u64::MAX as u128) as u64,
        });
    }
    let count = count as usize;
    let end = data_end(count, dim);
    let block = &bytes[HEADER_LEN..end];
    if end == bytes.len() {
        return Err(StoreError::TruncatedFile {
            offset: end as u64,
            expected: end as u64 + 1,
        });
    }
    let trailer: Trailer = serde_json::from_slice(&bytes[end..]).map_err(StoreError::BadTrailer)?;
    let actual = crc32fast::hash(block);
    if actual != trailer.crc32 {
        return Err(StoreError::ChecksumMismatch {
            expected: trailer.crc32,
            actual,
        });
    }
    if trailer.ids.len() != count {
        return Err(StoreError::ShapeMismatch(format!(
            "header says {count} rows, trailer lists {} ids",
            trailer.ids.len()
        )));
    }
    let data: Vec<f32> = block
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingTable::new(dim, data, trailer.ids)
}

pub fn save_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let bytes = encode_table(table)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_table(path: impl AsRef<Path>) -> Result<EmbeddingTable, StoreError> {
    let bytes = fs::read(path)?;
    decode_table(&bytes)
}

/// One or several captions for an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TextRef {
    One(String),
    Many(Vec<String>),
}

impl TextRef {
    fn pick(&self, index: usize) -> Option<&str> {
        match self {
            TextRef::One(s) if index == 0 => Some(s),
            TextRef::One(_) => None,
            TextRef::Many(v) => v.get(index).map(String::as_str),
        }
    }

    fn len(&self) -> usize {
        match self {
            TextRef::One(_) => 1,
            TextRef::Many(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub image: String,
    pub text: TextRef,
}

/// `{"pairs": [{"image": id, "text": id | [id, ...]}, ...]}`
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairManifest {
    pub pairs: Vec<PairEntry>,
}

impl PairManifest {
    /// Manifest pairing row i of `images` with row i of `texts`.
    pub fn aligned(images: &EmbeddingTable, texts: &EmbeddingTable) -> Self {
        let pairs = images
            .ids()
            .iter()
            .zip(texts.ids())
            .map(|(i, t)| PairEntry {
                image: i.clone(),
                text: TextRef::One(t.clone()),
            })
            .collect();
        Self { pairs }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let bytes = fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(StoreError::BadManifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec_pretty(self).map_err(StoreError::BadManifest)?;
        fs::write(path, bytes)?;
        Ok(())
    }
}

/// Image and text tables whose row i forms pair i.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    images: EmbeddingTable,
    texts: EmbeddingTable,
}

impl PairedDataset {
    pub fn new(images: EmbeddingTable, texts: EmbeddingTable) -> Result<Self, StoreError> {
        if images.dim() != texts.dim() {
            return Err(StoreError::DimensionMismatch {
                left: images.dim(),
                right: texts.dim(),
            });
        }
        if images.count() != texts.count() {
            return Err(StoreError::ShapeMismatch(format!(
                "{} images vs {} texts",
                images.count(),
                texts.count()
            )));
        }
        Ok(Self { images, texts })
    }

    pub fn images(&self) -> &EmbeddingTable {
        &self.images
    }

    pub fn texts(&self) -> &EmbeddingTable {
        &self.texts
    }

    pub fn len(&self) -> usize {
        self.images.count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.images.dim()
    }

    /// Sub-dataset of the given pair indices.
    pub fn select(&self, rows: &[usize]) -> Result<Self, StoreError> {
        Self::new(self.images.select(rows)?, self.texts.select(rows)?)
    }
}

/// Pairs image rows with text rows through a manifest.
///
/// The result keeps the image table's row order; text rows are re-ordered to
/// match and text rows the manifest never names are dropped. For entries
/// with several captions, `caption_index` selects which one is used.
pub fn make_pairs(
    images: &EmbeddingTable,
    texts: &EmbeddingTable,
    manifest: &PairManifest,
    caption_index: usize,
) -> Result<PairedDataset, StoreError> {
    if images.dim() != texts.dim() {
        return Err(StoreError::DimensionMismatch {
            left: images.dim(),
            right: texts.dim(),
        });
    }
    let image_index = images.id_index();
    let text_index = texts.id_index();

    let mut by_image: HashMap<&str, &PairEntry> = HashMap::with_capacity(manifest.pairs.len());
    let mut unmatched = Vec::new();
    for entry in &manifest.pairs {
        if !image_index.contains_key(entry.image.as_str()) {
            unmatched.push(entry.image.clone());
        }
        by_image.insert(entry.image.as_str(), entry);
    }

    let mut text_rows = Vec::with_capacity(images.count());
    let mut used = HashSet::with_capacity(images.count());
    for id in images.ids() {
        let Some(entry) = by_image.get(id.as_str()) else {
            unmatched.push(id.clone());
            continue;
        };
        let Some(text_id) = entry.text.pick(caption_index) else {
            return Err(StoreError::CaptionIndex {
                image: id.clone(),
                index: caption_index,
                available: entry.text.len(),
            });
        };
        match text_index.get(text_id) {
            Some(&row) => {
                if !used.insert(row) {
                    return Err(StoreError::DuplicatePairing(text_id.to_string()));
                }
                text_rows.push(row);
            }
            None => unmatched.push(text_id.to_string()),
        }
    }
    if !unmatched.is_empty() {
        return Err(StoreError::UnmatchedId(unmatched));
    }
    PairedDataset::new(images.clone(), texts.select(&text_rows)?)
}

/// Text embeddings of class prompts; row labels are the table ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPromptTable {
    table: EmbeddingTable,
}

impl ClassPromptTable {
    pub fn new(table: EmbeddingTable) -> Result<Self, StoreError> {
        if table.count() < 2 {
            return Err(StoreError::TooFewClasses(table.count()));
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn labels(&self) -> &[String] {
        self.table.ids()
    }

    pub fn num_classes(&self) -> usize {
        self.table.count()
    }

    /// Class index of each label name; `None` for unknown labels.
    pub fn label_indices<S: AsRef<str>>(&self, names: &[S]) -> Vec<Option<usize>> {
        let index = self.table.id_index();
        names.iter().map(|n| index.get(n.as_ref()).copied()).collect()
    }
}
