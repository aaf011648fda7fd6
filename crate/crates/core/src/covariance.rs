//! Mean, centering and covariance of the image matrix `A` (one column per
//! image) computed as map-reduce passes over datastore chunks.
//!
//! Two shapes of `C` are supported:
//! * pixel mode, `C = A Aᵀ` (`N² x N²`), the sum of per-image outer products;
//! * gram mode, `C = Aᵀ A` (`M x M`), pairwise inner products of images.
//!
//! Both share their nonzero spectrum. No `1/(M-1)` factor is applied; the
//! correlation step cancels any scalar.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ingest::{ChunkInfo, DataStore, IngestError};
use crate::mapreduce::{run_tasks, MapReduceError, MapReduceJob};

pub const DEFAULT_MEMORY_BUDGET: u64 = 2 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    Pixel,
    Gram,
}

impl CovarianceMode {
    pub fn name(self) -> &'static str {
        match self {
            CovarianceMode::Pixel => "pixel",
            CovarianceMode::Gram => "gram",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CovarianceError {
    #[error(transparent)]
    MapReduce(#[from] MapReduceError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("mean has length {got}, images have {expected} pixels")]
    LengthMismatch { expected: usize, got: usize },
    #[error(
        "{mode} mode needs {required} bytes for C, over the {budget}-byte budget{}",
        match .feasible { Some(m) => format!("; use {} mode", m.name()), None => String::new() }
    )]
    BudgetExceeded {
        mode: &'static str,
        required: u64,
        budget: u64,
        feasible: Option<CovarianceMode>,
    },
    #[error("empty data matrix")]
    Empty,
    #[error("covariance file: {0}")]
    Persist(String),
}

#[derive(Debug, Clone, Copy)]
pub struct CovarianceOptions {
    pub workers: usize,
    pub memory_budget: u64,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        CovarianceOptions {
            workers: crate::mapreduce::default_workers(),
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

fn add_into(a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    // empty vector is the additive identity
    if a.is_empty() {
        return b;
    }
    if b.is_empty() {
        return a;
    }
    let mut a = a;
    for (x, y) in a.iter_mut().zip(&b) {
        *x += y;
    }
    a
}

/// Per-pixel mean over all images, `(1/M) Σ x_j`.
pub fn compute_mean(store: &DataStore, workers: usize) -> Result<Vec<f64>, CovarianceError> {
    let n2 = store.vector_length();
    let sum = MapReduceJob {
        store,
        map_fn: |chunk: &ChunkInfo| -> Result<Vec<f64>, IngestError> {
            let block = store.read_chunk(chunk.chunk_id)?;
            let mut acc = vec![0.0; n2];
            for img in block.chunks_exact(n2) {
                for (a, v) in acc.iter_mut().zip(img) {
                    *a += v;
                }
            }
            Ok(acc)
        },
        reduce_fn: add_into,
        identity: Vec::new(),
        workers,
    }
    .run()?;
    if sum.is_empty() {
        return Err(CovarianceError::Empty);
    }
    let m = store.image_count() as f64;
    Ok(sum.into_iter().map(|v| v / m).collect())
}

/// The image matrix `A`, columns `Φ_j = x_j - mean` when centered. Columns
/// are produced chunk by chunk on demand; nothing beyond one chunk is held.
#[derive(Debug, Clone)]
pub struct DataMatrix {
    store: DataStore,
    mean: Vec<f64>,
    centered: bool,
}

/// Centers `store` on `mean`.
pub fn center(store: &DataStore, mean: Vec<f64>) -> Result<DataMatrix, CovarianceError> {
    if mean.len() != store.vector_length() {
        return Err(CovarianceError::LengthMismatch {
            expected: store.vector_length(),
            got: mean.len(),
        });
    }
    Ok(DataMatrix {
        store: store.clone(),
        mean,
        centered: true,
    })
}

impl DataMatrix {
    pub fn uncentered(store: &DataStore) -> Self {
        DataMatrix {
            store: store.clone(),
            mean: vec![0.0; store.vector_length()],
            centered: false,
        }
    }

    pub fn store(&self) -> &DataStore {
        &self.store
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// M, the number of columns.
    pub fn image_count(&self) -> usize {
        self.store.image_count()
    }

    /// N², the length of each column.
    pub fn vector_length(&self) -> usize {
        self.store.vector_length()
    }

    /// Columns of one chunk, concatenated.
    pub fn column_block(&self, chunk_id: usize) -> Result<Vec<f64>, IngestError> {
        let mut block = self.store.read_chunk(chunk_id)?;
        if self.centered {
            for col in block.chunks_exact_mut(self.mean.len()) {
                for (x, m) in col.iter_mut().zip(&self.mean) {
                    *x -= m;
                }
            }
        }
        Ok(block)
    }

    /// Materializes all of `A` (`N² x M`). Test and small-input helper.
    pub fn to_dense(&self) -> Result<DMatrix<f64>, IngestError> {
        let n2 = self.vector_length();
        let mut a = DMatrix::zeros(n2, self.image_count());
        for chunk in self.store.chunks() {
            let block = self.column_block(chunk.chunk_id)?;
            for (k, col) in block.chunks_exact(n2).enumerate() {
                a.column_mut(chunk.images.start + k).copy_from_slice(col);
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceResult {
    pub mode: CovarianceMode,
    pub c: DMatrix<f64>,
    /// `sqrt(diag(C))`.
    pub s: Vec<f64>,
    pub image_count: usize,
    pub vector_length: usize,
}

struct GramBlock {
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    values: Vec<f64>,
}

fn check_budget(
    mode: CovarianceMode,
    dim: usize,
    other_dim: usize,
    budget: u64,
) -> Result<(), CovarianceError> {
    let bytes = |d: usize| (d as u64).saturating_mul(d as u64).saturating_mul(8);
    let required = bytes(dim);
    if required <= budget {
        return Ok(());
    }
    let other = match mode {
        CovarianceMode::Pixel => CovarianceMode::Gram,
        CovarianceMode::Gram => CovarianceMode::Pixel,
    };
    Err(CovarianceError::BudgetExceeded {
        mode: mode.name(),
        required,
        budget,
        feasible: (bytes(other_dim) <= budget).then_some(other),
    })
}

pub fn covariance(
    amat: &DataMatrix,
    mode: CovarianceMode,
    opts: &CovarianceOptions,
) -> Result<CovarianceResult, CovarianceError> {
    let (m, n2) = (amat.image_count(), amat.vector_length());
    if m == 0 || n2 == 0 {
        return Err(CovarianceError::Empty);
    }
    let c = match mode {
        CovarianceMode::Pixel => {
            check_budget(mode, n2, m, opts.memory_budget)?;
            pixel_covariance(amat, opts.workers)?
        }
        CovarianceMode::Gram => {
            check_budget(mode, m, n2, opts.memory_budget)?;
            gram_covariance(amat, opts.workers)?
        }
    };
    let s = c.diagonal().iter().map(|d| d.max(0.0).sqrt()).collect();
    Ok(CovarianceResult {
        mode,
        c,
        s,
        image_count: m,
        vector_length: n2,
    })
}

/// `Σ_j Φ_j Φ_jᵀ`; each map task accumulates the upper triangle for its
/// chunk and the result is mirrored once at the end.
fn pixel_covariance(amat: &DataMatrix, workers: usize) -> Result<DMatrix<f64>, CovarianceError> {
    let n2 = amat.vector_length();
    let upper = MapReduceJob {
        store: amat.store(),
        map_fn: |chunk: &ChunkInfo| -> Result<Vec<f64>, IngestError> {
            let block = amat.column_block(chunk.chunk_id)?;
            let mut acc = vec![0.0; n2 * n2];
            for phi in block.chunks_exact(n2) {
                for i in 0..n2 {
                    let pi = phi[i];
                    let row = &mut acc[i * n2..(i + 1) * n2];
                    for j in i..n2 {
                        row[j] += pi * phi[j];
                    }
                }
            }
            Ok(acc)
        },
        reduce_fn: add_into,
        identity: Vec::new(),
        workers,
    }
    .run()?;
    let mut c = DMatrix::zeros(n2, n2);
    for i in 0..n2 {
        for j in i..n2 {
            let v = upper[i * n2 + j];
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

/// `Aᵀ A` assembled from one block per chunk pair `(a, b)`, `a <= b`.
fn gram_covariance(amat: &DataMatrix, workers: usize) -> Result<DMatrix<f64>, CovarianceError> {
    let n2 = amat.vector_length();
    let chunks = amat.store().chunks();
    let pairs: Vec<(usize, usize)> = (0..chunks.len())
        .flat_map(|a| (a..chunks.len()).map(move |b| (a, b)))
        .collect();

    let blocks = run_tasks(
        &pairs,
        workers,
        |&(a, b): &(usize, usize)| -> Result<Vec<GramBlock>, String> {
            let tag = |e: IngestError| format!("chunk pair ({a},{b}): {e}");
            let left = amat.column_block(a).map_err(tag)?;
            let right = if a == b {
                None
            } else {
                Some(amat.column_block(b).map_err(tag)?)
            };
            let right_ref = right.as_deref().unwrap_or(&left);
            let (rows, cols) = (chunks[a].images.clone(), chunks[b].images.clone());
            let mut values = Vec::with_capacity(rows.len() * cols.len());
            for (i, x) in left.chunks_exact(n2).enumerate() {
                for (j, y) in right_ref.chunks_exact(n2).enumerate() {
                    // diagonal blocks: fill the upper part, mirror later
                    if a == b && j < i {
                        values.push(0.0);
                        continue;
                    }
                    values.push(x.iter().zip(y).map(|(p, q)| p * q).sum());
                }
            }
            Ok(vec![GramBlock { rows, cols, values }])
        },
        |mut x: Vec<GramBlock>, y: Vec<GramBlock>| {
            x.extend(y);
            x
        },
        Vec::new(),
    )?;

    let m = amat.image_count();
    let mut c = DMatrix::zeros(m, m);
    for block in blocks {
        let width = block.cols.len();
        for (bi, i) in block.rows.clone().enumerate() {
            for (bj, j) in block.cols.clone().enumerate() {
                if j < i {
                    continue;
                }
                let v = block.values[bi * width + bj];
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
    }
    Ok(c)
}

#[derive(Debug, Serialize, Deserialize)]
struct CovarianceSidecar {
    mode: CovarianceMode,
    image_count: usize,
    vector_length: usize,
    rows: usize,
    cols: usize,
    layout: String,
}

impl CovarianceResult {
    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    /// Writes `<stem>.f64` (row-major little-endian float64) and
    /// `<stem>.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(), CovarianceError> {
        let dir = dir.as_ref();
        let persist = |e: std::io::Error| CovarianceError::Persist(e.to_string());
        fs::create_dir_all(dir).map_err(persist)?;
        let n = self.dim();
        let mut bytes = Vec::with_capacity(n * n * 8);
        for i in 0..n {
            for j in 0..n {
                bytes.extend_from_slice(&self.c[(i, j)].to_le_bytes());
            }
        }
        fs::write(dir.join(format!("{stem}.f64")), bytes).map_err(persist)?;
        let sidecar = CovarianceSidecar {
            mode: self.mode,
            image_count: self.image_count,
            vector_length: self.vector_length,
            rows: n,
            cols: n,
            layout: "row-major little-endian float64".into(),
        };
        let json = serde_json::to_vec_pretty(&sidecar)
            .map_err(|e| CovarianceError::Persist(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.json")), json).map_err(persist)
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self, CovarianceError> {
        let dir = dir.as_ref();
        let persist = |e: std::io::Error| CovarianceError::Persist(e.to_string());
        let meta: CovarianceSidecar =
            serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json"))).map_err(persist)?)
                .map_err(|e| CovarianceError::Persist(e.to_string()))?;
        let bytes = fs::read(dir.join(format!("{stem}.f64"))).map_err(persist)?;
        if bytes.len() != meta.rows * meta.cols * 8 {
            return Err(CovarianceError::Persist(format!(
                "expected {} bytes, found {}",
                meta.rows * meta.cols * 8,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let c = DMatrix::from_row_slice(meta.rows, meta.cols, &values);
        let s = c.diagonal().iter().map(|d| d.max(0.0).sqrt()).collect();
        Ok(CovarianceResult {
            mode: meta.mode,
            c,
            s,
            image_count: meta.image_count,
            vector_length: meta.vector_length,
        })
    }
}
