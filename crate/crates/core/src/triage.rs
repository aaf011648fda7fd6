//! KEEP/DISCARD labelling from eigenspace scores.
//!
//! Each score column is standardized robustly, `z = 0.6745 (x - median) /
//! MAD`, and an image's distance is the root-mean-square of its z values over
//! the retained components. Images farther than the threshold are discarded.
//!
//! This rule is a reconstruction: the original method shows good and junk
//! images separating in the PC1/PC2 plane but gives no numeric criterion.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::ingest::DataStore;

pub const DEFAULT_THRESHOLD: f64 = 3.5;
/// Scales MAD to the standard deviation of a normal distribution.
pub const MAD_SCALE: f64 = 0.6745;
pub const MAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TriageError {
    #[error("need at least 3 images for robust statistics, got {0}")]
    InsufficientPopulation(usize),
    #[error("need at least one score component")]
    NoComponents,
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("{scores} score rows for {images} images")]
    RowMismatch { scores: usize, images: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Keep,
    Discard,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Keep => "KEEP",
            Label::Discard => "DISCARD",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriageRow {
    pub id: String,
    pub scores: Vec<f64>,
    pub distance: f64,
    pub label: Label,
    pub source_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriageReport {
    pub rows: Vec<TriageRow>,
    pub threshold: f64,
    pub k: usize,
    pub kept_bytes: u64,
    pub discarded_bytes: u64,
    pub kept_fraction: f64,
}

/// Median of a copy of `values`; mean of the two central values for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn robust_distance(scores: &DMatrix<f64>) -> Result<Vec<f64>, TriageError> {
    let (m, k) = scores.shape();
    if m < 3 {
        return Err(TriageError::InsufficientPopulation(m));
    }
    if k == 0 {
        return Err(TriageError::NoComponents);
    }
    let mut sum_sq = vec![0.0; m];
    for c in 0..k {
        let col: Vec<f64> = scores.column(c).iter().copied().collect();
        let med = median(&col);
        let deviations: Vec<f64> = col.iter().map(|x| (x - med).abs()).collect();
        let mad = median(&deviations).max(MAD_FLOOR);
        for (acc, x) in sum_sq.iter_mut().zip(&col) {
            let z = MAD_SCALE * (x - med) / mad;
            *acc += z * z;
        }
    }
    Ok(sum_sq.into_iter().map(|s| (s / k as f64).sqrt()).collect())
}

/// Labels every image of `store`; `scores` rows follow manifest order.
pub fn classify(
    store: &DataStore,
    scores: &DMatrix<f64>,
    threshold: f64,
) -> Result<TriageReport, TriageError> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(TriageError::BadThreshold(threshold));
    }
    if scores.nrows() != store.image_count() {
        return Err(TriageError::RowMismatch {
            scores: scores.nrows(),
            images: store.image_count(),
        });
    }
    let distances = robust_distance(scores)?;
    let rows: Vec<TriageRow> = store
        .manifest()
        .iter()
        .zip(distances)
        .enumerate()
        .map(|(i, (meta, distance))| TriageRow {
            id: meta.id.clone(),
            scores: scores.row(i).iter().copied().collect(),
            distance,
            label: if distance > threshold {
                Label::Discard
            } else {
                Label::Keep
            },
            source_bytes: meta.source_bytes,
        })
        .collect();

    let kept_bytes = rows
        .iter()
        .filter(|r| r.label == Label::Keep)
        .map(|r| r.source_bytes)
        .sum();
    Ok(TriageReport::from_rows(
        rows,
        threshold,
        scores.ncols(),
        kept_bytes,
    ))
}

impl TriageReport {
    fn from_rows(rows: Vec<TriageRow>, threshold: f64, k: usize, kept_bytes: u64) -> Self {
        let total: u64 = rows.iter().map(|r| r.source_bytes).sum();
        let discarded_bytes = total - kept_bytes;
        let kept_fraction = if total == 0 {
            1.0
        } else {
            kept_bytes as f64 / total as f64
        };
        TriageReport {
            rows,
            threshold,
            k,
            kept_bytes,
            discarded_bytes,
            kept_fraction,
        }
    }

    pub fn kept(&self) -> impl Iterator<Item = &TriageRow> {
        self.rows.iter().filter(|r| r.label == Label::Keep)
    }

    pub fn discarded(&self) -> impl Iterator<Item = &TriageRow> {
        self.rows.iter().filter(|r| r.label == Label::Discard)
    }

    /// `image_id,pc1,...,pck,distance,label`, floats in shortest
    /// round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id");
        for c in 1..=self.k {
            out.push_str(&format!(",pc{c}"));
        }
        out.push_str(",distance,label\n");
        for row in &self.rows {
            out.push_str(&row.id);
            for v in &row.scores {
                out.push_str(&format!(",{v:?}"));
            }
            out.push_str(&format!(",{:?},{}\n", row.distance, row.label.as_str()));
        }
        out
    }
}
