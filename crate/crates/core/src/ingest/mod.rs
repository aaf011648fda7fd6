//! Micrograph ingest: MRC2014 and raw float64 readers, row-major vector
//! flattening, and the chunked on-disk datastore consumed by the map phase.

mod datastore;
mod mrc;
mod raw;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use datastore::{build_datastore, ChunkInfo, DataStore, ImageMeta, STORE_MANIFEST};
pub use mrc::{load_mrc, write_mrc, ByteOrder, MrcMode};
pub use raw::{load_raw_dir, write_raw_dir};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: file too short ({actual} bytes, header declares {expected})")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: unsupported MRC mode {mode}")]
    UnsupportedMode { path: PathBuf, mode: i32 },
    #[error("{path}: invalid dimensions nx={nx} ny={ny} nz={nz}")]
    InvalidDimensions {
        path: PathBuf,
        nx: i32,
        ny: i32,
        nz: i32,
    },
    #[error("{path}: non-finite pixel in section {section}")]
    NonFinite { path: PathBuf, section: usize },
    #[error("image {id}: expected {expected_w}x{expected_h}, got {width}x{height}")]
    MixedDimensions {
        id: String,
        expected_w: usize,
        expected_h: usize,
        width: usize,
        height: usize,
    },
    #[error("duplicate image id {0}")]
    DuplicateId(String),
    #[error("datastore needs at least one image")]
    Empty,
    #[error("chunk size must be at least 1")]
    ZeroChunkSize,
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("datastore manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("chunk {0} out of range")]
    NoSuchChunk(usize),
    #[error("image {id}: {reason}")]
    InvalidImage { id: String, reason: String },
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> IngestError {
    let path = path.into();
    move |source| IngestError::Io { path, source }
}

/// Where an image came from: a file and the section (frame) inside it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub path: PathBuf,
    pub frame: usize,
}

/// One micrograph held as 64-bit reals, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub source: SourceRef,
    /// Size of the image in its source encoding; drives the triage byte totals.
    pub source_bytes: u64,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        pixels: Vec<f64>,
    ) -> Result<Self, IngestError> {
        let id = id.into();
        let rec = ImageRecord {
            source: SourceRef {
                path: PathBuf::new(),
                frame: 0,
            },
            source_bytes: (width * height * std::mem::size_of::<f64>()) as u64,
            id,
            width,
            height,
            pixels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn with_source(
        mut self,
        path: impl Into<PathBuf>,
        frame: usize,
        source_bytes: u64,
    ) -> Self {
        self.source = SourceRef {
            path: path.into(),
            frame,
        };
        self.source_bytes = source_bytes;
        self
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |reason: String| IngestError::InvalidImage {
            id: self.id.clone(),
            reason,
        };
        if self.width == 0 || self.height == 0 {
            return Err(bad(format!(
                "zero dimension {}x{}",
                self.width, self.height
            )));
        }
        if self.pixels.len() != self.width * self.height {
            return Err(bad(format!(
                "{} pixels for a {}x{} image",
                self.pixels.len(),
                self.width,
                self.height
            )));
        }
        if let Some(i) = self.pixels.iter().position(|p| !p.is_finite()) {
            return Err(bad(format!("non-finite pixel at index {i}")));
        }
        Ok(())
    }

    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn vector_length(&self) -> usize {
        self.width * self.height
    }
}

/// Flattens an image row-major: `v[r * width + c] = pixels[r][c]`.
pub fn image_to_vector(img: &ImageRecord) -> Vec<f64> {
    // storage is already row-major
    img.pixels.clone()
}
