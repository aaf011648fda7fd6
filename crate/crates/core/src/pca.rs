//! Correlation normalization, SVD of the correlation matrix and projection of
//! the images into the resulting eigenspace.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceMode, CovarianceResult, DataMatrix};
use crate::ingest::{ChunkInfo, IngestError};
use crate::linalg::{jacobi_eigen, NoConvergence};
use crate::mapreduce::{MapReduceError, MapReduceJob};

/// Diagonal entries of `C` at or below this are treated as zero variance.
pub const MIN_VARIANCE: f64 = 1e-300;
pub const DEFAULT_EXPLAINED: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum PcaError {
    #[error("zero variance at index {index} (constant after centering)")]
    ZeroVariance { index: usize },
    #[error("svd: {0}")]
    NoConvergence(#[from] NoConvergence),
    #[error("k = {k} outside 1..={max}")]
    ComponentsOutOfRange { k: usize, max: usize },
    #[error("pca was computed in {pca} mode but covariance is {cov} mode")]
    ModeMismatch {
        pca: &'static str,
        cov: &'static str,
    },
    #[error("explained-variance target {0} outside (0, 1]")]
    BadExplainedTarget(f64),
    #[error(transparent)]
    MapReduce(#[from] MapReduceError),
    #[error("pca file: {0}")]
    Persist(String),
}

#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub r: DMatrix<f64>,
    pub source_mode: CovarianceMode,
}

impl CorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.r.nrows()
    }
}

/// `R[i][j] = C[i][j] / (s[i] s[j])` with `s = sqrt(diag(C))`.
pub fn correlation_from_covariance(cov: &CovarianceResult) -> Result<CorrelationMatrix, PcaError> {
    let n = cov.c.nrows();
    if let Some(index) = (0..n).find(|&i| cov.c[(i, i)].is_nan() || cov.c[(i, i)] <= MIN_VARIANCE) {
        return Err(PcaError::ZeroVariance { index });
    }
    let s: Vec<f64> = (0..n).map(|i| cov.c[(i, i)].sqrt()).collect();
    let r = DMatrix::from_fn(n, n, |i, j| cov.c[(i, j)] / (s[i] * s[j]));
    Ok(CorrelationMatrix {
        r,
        source_mode: cov.mode,
    })
}

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// Nonincreasing.
    pub singular_values: Vec<f64>,
    /// Left singular vectors, one column per component.
    pub components: DMatrix<f64>,
    /// Right singular vectors; equal to `components` up to the sign of the
    /// matching eigenvalue.
    pub right: DMatrix<f64>,
    /// `σ_i / Σσ`.
    pub explained: Vec<f64>,
    /// Retained component count; the full dimension straight out of `svd`.
    pub k: usize,
    pub scores: Option<DMatrix<f64>>,
    pub source_mode: CovarianceMode,
}

/// SVD of a symmetric matrix via Jacobi eigendecomposition: `σ = |λ|`,
/// `U` the eigenvectors, `V = U sign(λ)`. Components are ordered by
/// descending σ, ties by Jacobi output index, and each column of `U` is
/// signed so its largest-magnitude entry (first on ties) is positive.
pub fn svd(corr: &CorrelationMatrix) -> Result<PcaResult, PcaError> {
    let n = corr.dim();
    let eig = jacobi_eigen(&corr.r)?;

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal σ keep the Jacobi index order
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
    });

    let mut singular_values = Vec::with_capacity(n);
    let mut components = DMatrix::zeros(n, n);
    let mut right = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let lambda = eig.eigenvalues[src];
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let flip = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        let fold = if lambda < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            components[(i, dst)] = flip * col[i];
            right[(i, dst)] = fold * flip * col[i];
        }
        singular_values.push(lambda.abs());
    }

    let total: f64 = singular_values.iter().sum();
    let explained = singular_values
        .iter()
        .map(|s| if total > 0.0 { s / total } else { 0.0 })
        .collect();

    Ok(PcaResult {
        singular_values,
        components,
        right,
        explained,
        k: n,
        scores: None,
        source_mode: corr.source_mode,
    })
}

/// Smallest k whose cumulative explained fraction reaches `target`.
pub fn components_for_explained(explained: &[f64], target: f64) -> Result<usize, PcaError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(PcaError::BadExplainedTarget(target));
    }
    let mut cumulative = 0.0;
    for (i, e) in explained.iter().enumerate() {
        cumulative += e;
        if cumulative >= target {
            return Ok(i + 1);
        }
    }
    Ok(explained.len())
}

/// Per-image eigenspace coordinates, `M x k`, rows in manifest order.
///
/// Gram mode: rows of `U_k Σ_k^{1/2}`. Pixel mode: `U_kᵀ (Φ_j / s)` for each
/// image, computed chunk-parallel.
pub fn project_scores(
    amat: &DataMatrix,
    pca: &PcaResult,
    cov: &CovarianceResult,
    k: usize,
    workers: usize,
) -> Result<DMatrix<f64>, PcaError> {
    if pca.source_mode != cov.mode {
        return Err(PcaError::ModeMismatch {
            pca: pca.source_mode.name(),
            cov: cov.mode.name(),
        });
    }
    let dim = pca.singular_values.len();
    if k == 0 || k > dim {
        return Err(PcaError::ComponentsOutOfRange { k, max: dim });
    }

    match cov.mode {
        CovarianceMode::Gram => {
            let m = pca.components.nrows();
            Ok(DMatrix::from_fn(m, k, |i, c| {
                pca.components[(i, c)] * pca.singular_values[c].sqrt()
            }))
        }
        CovarianceMode::Pixel => {
            let n2 = amat.vector_length();
            let s = &cov.s;
            let u = &pca.components;
            let rows = MapReduceJob {
                store: amat.store(),
                map_fn: |chunk: &ChunkInfo| -> Result<Vec<(usize, Vec<f64>)>, IngestError> {
                    let block = amat.column_block(chunk.chunk_id)?;
                    Ok(block
                        .chunks_exact(n2)
                        .enumerate()
                        .map(|(j, phi)| {
                            let coords = (0..k)
                                .map(|c| {
                                    phi.iter()
                                        .zip(s)
                                        .enumerate()
                                        .map(|(p, (x, sd))| u[(p, c)] * (x / sd))
                                        .sum()
                                })
                                .collect();
                            (chunk.images.start + j, coords)
                        })
                        .collect())
                },
                reduce_fn: |mut a: Vec<(usize, Vec<f64>)>, b| {
                    a.extend(b);
                    a
                },
                identity: Vec::new(),
                workers,
            }
            .run()?;
            let mut scores = DMatrix::zeros(amat.image_count(), k);
            for (row, coords) in rows {
                for (c, v) in coords.into_iter().enumerate() {
                    scores[(row, c)] = v;
                }
            }
            Ok(scores)
        }
    }
}

impl PcaResult {
    pub fn with_scores(mut self, scores: DMatrix<f64>) -> Self {
        self.k = scores.ncols();
        self.scores = Some(scores);
        self
    }

    /// Writes `pca.json` (spectrum, explained fractions, k) plus
    /// `components.f64` and, when present, `scores.f64` as row-major
    /// little-endian float64.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), PcaError> {
        let dir = dir.as_ref();
        let persist = |e: std::io::Error| PcaError::Persist(e.to_string());
        fs::create_dir_all(dir).map_err(persist)?;
        let summary = PcaSummary {
            mode: self.source_mode,
            k: self.k,
            singular_values: self.singular_values.clone(),
            explained: self.explained.clone(),
            components_shape: [self.components.nrows(), self.components.ncols()],
            scores_shape: self.scores.as_ref().map(|s| [s.nrows(), s.ncols()]),
        };
        let json =
            serde_json::to_vec_pretty(&summary).map_err(|e| PcaError::Persist(e.to_string()))?;
        fs::write(dir.join("pca.json"), json).map_err(persist)?;
        fs::write(
            dir.join("components.f64"),
            row_major_bytes(&self.components),
        )
        .map_err(persist)?;
        if let Some(scores) = &self.scores {
            fs::write(dir.join("scores.f64"), row_major_bytes(scores)).map_err(persist)?;
        }
        Ok(())
    }
}

/// Reads back what [`PcaResult::save`] wrote: the summary and the score
/// matrix.
pub fn load_scores(dir: impl AsRef<Path>) -> Result<(PcaSummary, DMatrix<f64>), PcaError> {
    let dir = dir.as_ref();
    let persist = |e: std::io::Error| PcaError::Persist(format!("{}: {e}", dir.display()));
    let text = fs::read(dir.join("pca.json")).map_err(persist)?;
    let summary: PcaSummary =
        serde_json::from_slice(&text).map_err(|e| PcaError::Persist(e.to_string()))?;
    let [rows, cols] = summary
        .scores_shape
        .ok_or_else(|| PcaError::Persist("no scores were saved".into()))?;
    let bytes = fs::read(dir.join("scores.f64")).map_err(persist)?;
    if bytes.len() != rows * cols * 8 {
        return Err(PcaError::Persist(format!(
            "scores.f64 holds {} bytes, expected {rows}x{cols} float64",
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    Ok((summary, DMatrix::from_row_iterator(rows, cols, values)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PcaSummary {
    pub mode: CovarianceMode,
    pub k: usize,
    pub singular_values: Vec<f64>,
    pub explained: Vec<f64>,
    pub components_shape: [usize; 2],
    pub scores_shape: Option<[usize; 2]>,
}

pub(crate) fn row_major_bytes(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}
