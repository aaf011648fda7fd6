//! Chunked column store for the data matrix.
//!
//! Images are grouped into chunks of whole images (never split), each chunk a
//! headerless little-endian float64 block of `count * vector_length` values
//! laid out image after image. A store is either resident in memory or
//! backed by a directory holding `chunk_NNNNN.f64` files plus
//! `datastore.json`.

use std::collections::HashSet;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{io_err, ImageRecord, IngestError, SourceRef};

pub const STORE_MANIFEST: &str = "datastore.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub source: SourceRef,
    pub source_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkInfo {
    pub chunk_id: usize,
    /// Manifest indices of the images in this chunk.
    pub images: Range<usize>,
    /// Offset of this chunk in the concatenation of all chunk files.
    pub byte_offset: u64,
    pub byte_length: u64,
}

impl ChunkInfo {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone)]
enum Backing {
    Memory(Arc<Vec<f64>>),
    Disk(PathBuf),
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreFile {
    width: usize,
    height: usize,
    vector_length: usize,
    image_count: usize,
    manifest: Vec<ImageMeta>,
    chunks: Vec<ChunkInfo>,
}

/// Immutable once built; clones share the backing buffer.
#[derive(Debug, Clone)]
pub struct DataStore {
    manifest: Vec<ImageMeta>,
    chunks: Vec<ChunkInfo>,
    width: usize,
    height: usize,
    vector_length: usize,
    backing: Backing,
}

/// Lays `records` out in `ceil(M / chunk_images)` in-memory chunks,
/// preserving input order.
pub fn build_datastore(
    records: &[ImageRecord],
    chunk_images: usize,
) -> Result<DataStore, IngestError> {
    if chunk_images == 0 {
        return Err(IngestError::ZeroChunkSize);
    }
    let first = records.first().ok_or(IngestError::Empty)?;
    let (width, height) = (first.width, first.height);
    let mut seen = HashSet::with_capacity(records.len());
    for rec in records {
        if rec.width != width || rec.height != height {
            return Err(IngestError::MixedDimensions {
                id: rec.id.clone(),
                expected_w: width,
                expected_h: height,
                width: rec.width,
                height: rec.height,
            });
        }
        if !seen.insert(rec.id.as_str()) {
            return Err(IngestError::DuplicateId(rec.id.clone()));
        }
        rec.validate()?;
    }

    let vector_length = width * height;
    let mut data = Vec::with_capacity(records.len() * vector_length);
    for rec in records {
        data.extend_from_slice(&rec.pixels);
    }
    let manifest = records
        .iter()
        .map(|r| ImageMeta {
            id: r.id.clone(),
            width: r.width,
            height: r.height,
            source: r.source.clone(),
            source_bytes: r.source_bytes,
        })
        .collect();

    Ok(DataStore {
        manifest,
        chunks: partition(records.len(), chunk_images, vector_length),
        width,
        height,
        vector_length,
        backing: Backing::Memory(Arc::new(data)),
    })
}

fn partition(count: usize, chunk_images: usize, vector_length: usize) -> Vec<ChunkInfo> {
    let bytes_per_image = (vector_length * 8) as u64;
    (0..count)
        .step_by(chunk_images)
        .enumerate()
        .map(|(chunk_id, start)| {
            let end = (start + chunk_images).min(count);
            ChunkInfo {
                chunk_id,
                images: start..end,
                byte_offset: start as u64 * bytes_per_image,
                byte_length: (end - start) as u64 * bytes_per_image,
            }
        })
        .collect()
}

fn chunk_file(dir: &Path, chunk_id: usize) -> PathBuf {
    dir.join(format!("chunk_{chunk_id:05}.f64"))
}

fn decode_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect()
}

impl DataStore {
    pub fn manifest(&self) -> &[ImageMeta] {
        &self.manifest
    }

    pub fn chunks(&self) -> &[ChunkInfo] {
        &self.chunks
    }

    pub fn image_count(&self) -> usize {
        self.manifest.len()
    }

    pub fn vector_length(&self) -> usize {
        self.vector_length
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn chunk_images(&self) -> usize {
        self.chunks.first().map_or(0, ChunkInfo::len)
    }

    pub fn total_source_bytes(&self) -> u64 {
        self.manifest.iter().map(|m| m.source_bytes).sum()
    }

    pub fn is_on_disk(&self) -> bool {
        matches!(self.backing, Backing::Disk(_))
    }

    /// Image vectors of one chunk, concatenated (`len * vector_length` values).
    pub fn read_chunk(&self, chunk_id: usize) -> Result<Vec<f64>, IngestError> {
        let info = self
            .chunks
            .get(chunk_id)
            .ok_or(IngestError::NoSuchChunk(chunk_id))?;
        match &self.backing {
            Backing::Memory(data) => {
                let start = info.images.start * self.vector_length;
                let end = info.images.end * self.vector_length;
                Ok(data[start..end].to_vec())
            }
            Backing::Disk(dir) => {
                let path = chunk_file(dir, chunk_id);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                if bytes.len() as u64 != info.byte_length {
                    return Err(IngestError::Truncated {
                        path,
                        expected: info.byte_length,
                        actual: bytes.len() as u64,
                    });
                }
                Ok(decode_f64s(&bytes))
            }
        }
    }

    /// Reconstructs the full record for manifest index `index`.
    pub fn read_image(&self, index: usize) -> Result<ImageRecord, IngestError> {
        let meta = &self.manifest[index];
        let chunk = self
            .chunks
            .iter()
            .find(|c| c.images.contains(&index))
            .ok_or(IngestError::NoSuchChunk(index))?;
        let block = self.read_chunk(chunk.chunk_id)?;
        let at = (index - chunk.images.start) * self.vector_length;
        Ok(ImageRecord {
            id: meta.id.clone(),
            width: meta.width,
            height: meta.height,
            pixels: block[at..at + self.vector_length].to_vec(),
            source: meta.source.clone(),
            source_bytes: meta.source_bytes,
        })
    }

    /// Persists the store under `dir` and returns a disk-backed handle.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<DataStore, IngestError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for info in &self.chunks {
            let block = self.read_chunk(info.chunk_id)?;
            let bytes: Vec<u8> = block.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = chunk_file(dir, info.chunk_id);
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        let file = StoreFile {
            width: self.width,
            height: self.height,
            vector_length: self.vector_length,
            image_count: self.image_count(),
            manifest: self.manifest.clone(),
            chunks: self.chunks.clone(),
        };
        let path = dir.join(STORE_MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&file)?).map_err(io_err(&path))?;
        Ok(DataStore {
            backing: Backing::Disk(dir.to_path_buf()),
            ..self.clone()
        })
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<DataStore, IngestError> {
        let dir = dir.as_ref();
        let path = dir.join(STORE_MANIFEST);
        let text = fs::read(&path).map_err(io_err(&path))?;
        let file: StoreFile = serde_json::from_slice(&text)?;
        if file.manifest.is_empty() {
            return Err(IngestError::Empty);
        }
        Ok(DataStore {
            manifest: file.manifest,
            chunks: file.chunks,
            width: file.width,
            height: file.height,
            vector_length: file.vector_length,
            backing: Backing::Disk(dir.to_path_buf()),
        })
    }
}
