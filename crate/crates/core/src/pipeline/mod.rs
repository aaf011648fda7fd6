//! The end-to-end workflow: ingest → reduce (PCA) → pick → store.

pub mod object_store;
pub mod svg;
pub mod synth;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rust_decimal::Decimal;
use serde::{Serialize, Serializer};

use crate::cost::{self, CostError, PricingScheme};
use crate::covariance::{
    center, compute_mean, covariance, CovarianceError, CovarianceMode, CovarianceOptions,
    DataMatrix, DEFAULT_MEMORY_BUDGET,
};
use crate::ingest::{
    build_datastore, io_err, load_mrc, load_raw_dir, DataStore, ImageRecord, IngestError,
};
use crate::pca::{
    components_for_explained, correlation_from_covariance, project_scores, svd, PcaError,
    PcaResult, DEFAULT_EXPLAINED,
};
use crate::triage::{classify, Label, TriageError, TriageReport, DEFAULT_THRESHOLD};
use object_store::{ObjectStore, StoreError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const KEEP_PREFIX: &str = "keep/";
pub const REPORT_PREFIX: &str = "reports/";
pub const DEFAULT_CHUNK_IMAGES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Mean,
    Covariance,
    Correlation,
    Svd,
    Project,
    Classify,
    Upload,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Ingest => "ingest",
            Stage::Mean => "mean",
            Stage::Covariance => "covariance",
            Stage::Correlation => "correlation",
            Stage::Svd => "svd",
            Stage::Project => "project",
            Stage::Classify => "classify",
            Stage::Upload => "upload",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Triage(#[from] TriageError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            source: e.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentChoice {
    Fixed(usize),
    /// Smallest k reaching this cumulative explained fraction.
    Explained(f64),
}

impl Default for ComponentChoice {
    fn default() -> Self {
        ComponentChoice::Explained(DEFAULT_EXPLAINED)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReduceOptions {
    pub mode: CovarianceMode,
    pub center: bool,
    pub components: ComponentChoice,
    pub workers: usize,
    pub memory_budget: u64,
}

impl Default for ReduceOptions {
    fn default() -> Self {
        ReduceOptions {
            mode: CovarianceMode::Gram,
            center: true,
            components: ComponentChoice::default(),
            workers: crate::mapreduce::default_workers(),
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub inputs: Vec<String>,
    pub chunk_images: usize,
    pub reduce: ReduceOptions,
    pub threshold: f64,
    pub pricing: Option<PathBuf>,
    pub out: PathBuf,
    /// Object store descriptor; see [`object_store::open_store`].
    pub store: String,
    pub parallel_uploads: bool,
}

impl PipelineConfig {
    pub fn new(inputs: Vec<String>, out: impl Into<PathBuf>, store: impl Into<String>) -> Self {
        PipelineConfig {
            inputs,
            chunk_images: DEFAULT_CHUNK_IMAGES,
            reduce: ReduceOptions::default(),
            threshold: DEFAULT_THRESHOLD,
            pricing: None,
            out: out.into(),
            store: store.into(),
            parallel_uploads: false,
        }
    }
}

/// Expands each input (file, raw directory, or glob) and loads every image.
/// `.mrc`/`.mrcs`/`.st` files are read as MRC; directories and `.csv`
/// files as raw manifests.
pub fn load_inputs(inputs: &[String]) -> Result<Vec<ImageRecord>, StageError> {
    let mut paths = Vec::new();
    for input in inputs {
        if input.contains(['*', '?', '[']) {
            let mut matched: Vec<PathBuf> = glob::glob(input)
                .map_err(|e| StageError::Other(format!("bad glob {input:?}: {e}")))?
                .filter_map(Result::ok)
                .collect();
            if matched.is_empty() {
                return Err(StageError::Other(format!("no files match {input:?}")));
            }
            matched.sort();
            paths.extend(matched);
        } else {
            paths.push(PathBuf::from(input));
        }
    }
    if paths.is_empty() {
        return Err(StageError::Ingest(IngestError::Empty));
    }
    let mut records = Vec::new();
    for path in paths {
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_dir() || ext == "csv" {
            records.extend(load_raw_dir(&path)?);
        } else {
            records.extend(load_mrc(&path)?);
        }
    }
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct ReduceOutput {
    pub amat: DataMatrix,
    pub pca: PcaResult,
    /// `M x max(k, 2)` (or `M x dim` when smaller); the first `k` columns
    /// feed triage, the first two the scatter plot.
    pub scores: DMatrix<f64>,
    pub k: usize,
    pub mode: CovarianceMode,
}

/// Mean, centering, covariance, correlation, SVD and projection.
pub fn reduce(
    store: &DataStore,
    opts: &ReduceOptions,
    timings: &mut Vec<(Stage, f64)>,
) -> Result<ReduceOutput, PipelineError> {
    let mut timed =
        |stage: Stage, start: Instant| timings.push((stage, start.elapsed().as_secs_f64()));

    let t = Instant::now();
    let amat = if opts.center {
        let mean = compute_mean(store, opts.workers).at(Stage::Mean)?;
        center(store, mean).at(Stage::Mean)?
    } else {
        DataMatrix::uncentered(store)
    };
    timed(Stage::Mean, t);

    let t = Instant::now();
    let cov_opts = CovarianceOptions {
        workers: opts.workers,
        memory_budget: opts.memory_budget,
    };
    let cov = covariance(&amat, opts.mode, &cov_opts).at(Stage::Covariance)?;
    timed(Stage::Covariance, t);

    let t = Instant::now();
    let corr = correlation_from_covariance(&cov).at(Stage::Correlation)?;
    timed(Stage::Correlation, t);

    let t = Instant::now();
    let pca = svd(&corr).at(Stage::Svd)?;
    timed(Stage::Svd, t);

    let t = Instant::now();
    let dim = pca.singular_values.len();
    let k = match opts.components {
        ComponentChoice::Fixed(k) => k,
        ComponentChoice::Explained(target) => {
            components_for_explained(&pca.explained, target).at(Stage::Project)?
        }
    };
    if k == 0 || k > dim {
        return Err(PipelineError {
            stage: Stage::Project,
            source: PcaError::ComponentsOutOfRange { k, max: dim }.into(),
        });
    }
    let plotted = k.max(2).min(dim);
    let scores = project_scores(&amat, &pca, &cov, plotted, opts.workers).at(Stage::Project)?;
    let k_scores = scores.columns(0, k).into_owned();
    let pca = pca.with_scores(k_scores);
    timed(Stage::Project, t);

    Ok(ReduceOutput {
        amat,
        pca,
        scores,
        k,
        mode: opts.mode,
    })
}

fn ser_threshold<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UploadSummary {
    pub backend: String,
    pub attempted: usize,
    pub succeeded: Vec<String>,
    pub failed: Vec<UploadFailure>,
}

#[derive(Debug, Clone, Serialize)]
pub struct UploadFailure {
    pub key: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SchemeSavings {
    pub scheme: String,
    /// Storage dollars per month saved by not storing discarded images, exact
    /// (unrounded) since synthetic runs are far below a cent.
    pub monthly_storage_savings: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PricingEcho {
    pub source: String,
    pub schemes: Vec<PricingScheme>,
    pub reduction_savings: Vec<SchemeSavings>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub image_count: usize,
    pub width: usize,
    pub height: usize,
    pub vector_length: usize,
    pub chunk_images: usize,
    pub mode: CovarianceMode,
    pub centered: bool,
    pub k: usize,
    pub singular_values: Vec<f64>,
    pub explained: Vec<f64>,
    #[serde(serialize_with = "ser_threshold")]
    pub threshold: f64,
    pub kept_count: usize,
    pub discarded_count: usize,
    pub kept_fraction: f64,
    pub total_bytes: u64,
    pub kept_bytes: u64,
    pub discarded_bytes: u64,
    pub discarded_ids: Vec<String>,
    pub discard_policy: &'static str,
    pub uploads: UploadSummary,
    pub pricing: Option<PricingEcho>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub workers: usize,
    pub stages: Vec<StageTiming>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub triage: TriageReport,
    pub report: Report,
    pub scores_csv: String,
    pub scatter_svg: String,
}

fn image_bytes(img: &ImageRecord) -> Vec<u8> {
    img.pixels.iter().flat_map(|p| p.to_le_bytes()).collect()
}

fn upload_keep(
    store: &DataStore,
    triage: &TriageReport,
    target: &dyn ObjectStore,
    parallel: bool,
    workers: usize,
) -> Result<UploadSummary, IngestError> {
    let keep: Vec<usize> = triage
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == Label::Keep)
        .map(|(i, _)| i)
        .collect();

    let upload_one = |i: usize| -> Result<(String, Result<(), String>), IngestError> {
        let img = store.read_image(i)?;
        let key = format!("{KEEP_PREFIX}{}.f64", img.id);
        let result = target
            .put(&key, &image_bytes(&img))
            .map_err(|e| e.to_string());
        Ok((key, result))
    };

    let outcomes: Vec<(String, Result<(), String>)> = if parallel && workers > 1 {
        let per = keep.len().div_ceil(workers).max(1);
        std::thread::scope(|scope| {
            let handles: Vec<_> = keep
                .chunks(per)
                .map(|part| {
                    scope.spawn(move || part.iter().map(|&i| upload_one(i)).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("upload worker panicked"))
                .collect::<Result<Vec<_>, _>>()
        })?
    } else {
        keep.iter()
            .map(|&i| upload_one(i))
            .collect::<Result<_, _>>()?
    };

    let mut summary = UploadSummary {
        backend: target.descriptor(),
        attempted: outcomes.len(),
        succeeded: Vec::new(),
        failed: Vec::new(),
    };
    for (key, result) in outcomes {
        match result {
            Ok(()) => summary.succeeded.push(key),
            Err(error) => summary.failed.push(UploadFailure { key, error }),
        }
    }
    Ok(summary)
}

fn pricing_echo(path: &Path, triage: &TriageReport) -> Result<PricingEcho, CostError> {
    let schemes = cost::load_pricing(path)?;
    let gb = |bytes: u64| Decimal::from(bytes) / Decimal::from(1_000_000_000u64);
    let before = gb(triage.kept_bytes + triage.discarded_bytes);
    let after = gb(triage.kept_bytes);
    let reduction_savings = schemes
        .iter()
        .map(|s| {
            cost::reduction_savings(before, after, s.storage_rate, Decimal::ONE).map(|v| {
                SchemeSavings {
                    scheme: s.name.clone(),
                    monthly_storage_savings: v.normalize().to_string(),
                }
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(PricingEcho {
        source: path.display().to_string(),
        schemes,
        reduction_savings,
    })
}

/// Triage plus artifact rendering for an already reduced store; shared by
/// `run_pipeline` and the `triage` subcommand.
pub fn triage_and_render(
    store: &DataStore,
    scores: &DMatrix<f64>,
    k: usize,
    threshold: f64,
) -> Result<(TriageReport, String, String), TriageError> {
    let triage = classify(store, &scores.columns(0, k).into_owned(), threshold)?;
    let pc1: Vec<f64> = scores.column(0).iter().copied().collect();
    let pc2: Vec<f64> = if scores.ncols() > 1 {
        scores.column(1).iter().copied().collect()
    } else {
        vec![0.0; scores.nrows()]
    };
    let svg = svg::scatter_svg(&triage, &pc1, &pc2);
    let csv = triage.to_csv();
    Ok((triage, csv, svg))
}

/// Runs the whole workflow. Artifacts land in `cfg.out`; KEEP images and
/// the three report files are uploaded to `cfg.store`. `report.json` and
/// `scores.csv` are deterministic for fixed input and options; wall-clock
/// timings go to `timings.json` instead.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let target = object_store::open_store(&cfg.store).at(Stage::Upload)?;
    run_pipeline_with(cfg, target.as_ref())
}

pub fn run_pipeline_with(
    cfg: &PipelineConfig,
    target: &dyn ObjectStore,
) -> Result<PipelineOutput, PipelineError> {
    if cfg.threshold.is_nan() || cfg.threshold <= 0.0 {
        return Err(PipelineError {
            stage: Stage::Classify,
            source: TriageError::BadThreshold(cfg.threshold).into(),
        });
    }
    let mut timings = Vec::new();
    fs::create_dir_all(&cfg.out)
        .map_err(io_err(&cfg.out))
        .at(Stage::Ingest)?;

    let t = Instant::now();
    let records = load_inputs(&cfg.inputs).at(Stage::Ingest)?;
    let store = build_datastore(&records, cfg.chunk_images)
        .and_then(|s| s.write_to(cfg.out.join("datastore")))
        .at(Stage::Ingest)?;
    drop(records);
    timings.push((Stage::Ingest, t.elapsed().as_secs_f64()));

    let reduced = reduce(&store, &cfg.reduce, &mut timings)?;
    reduced.pca.save(cfg.out.join("pca")).at(Stage::Svd)?;

    let t = Instant::now();
    let (triage, scores_csv, scatter_svg) =
        triage_and_render(&store, &reduced.scores, reduced.k, cfg.threshold).at(Stage::Classify)?;
    timings.push((Stage::Classify, t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let uploads = upload_keep(
        &store,
        &triage,
        target,
        cfg.parallel_uploads,
        cfg.reduce.workers,
    )
    .at(Stage::Upload)?;
    timings.push((Stage::Upload, t.elapsed().as_secs_f64()));

    let pricing = cfg
        .pricing
        .as_deref()
        .map(|p| pricing_echo(p, &triage))
        .transpose()
        .at(Stage::Report)?;

    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        image_count: store.image_count(),
        width: store.width(),
        height: store.height(),
        vector_length: store.vector_length(),
        chunk_images: cfg.chunk_images,
        mode: reduced.mode,
        centered: cfg.reduce.center,
        k: reduced.k,
        singular_values: reduced.pca.singular_values.clone(),
        explained: reduced.pca.explained.clone(),
        threshold: cfg.threshold,
        kept_count: triage.kept().count(),
        discarded_count: triage.discarded().count(),
        kept_fraction: triage.kept_fraction,
        total_bytes: triage.kept_bytes + triage.discarded_bytes,
        kept_bytes: triage.kept_bytes,
        discarded_bytes: triage.discarded_bytes,
        discarded_ids: triage.discarded().map(|r| r.id.clone()).collect(),
        discard_policy: "discarded images are not uploaded; they remain in the local datastore",
        uploads,
        pricing,
    };
    let report_json = serde_json::to_string_pretty(&report)
        .map_err(|e| StageError::Other(e.to_string()))
        .at(Stage::Report)?;

    let artifacts = [
        ("scores.csv", scores_csv.as_bytes()),
        ("report.json", report_json.as_bytes()),
        ("scatter.svg", scatter_svg.as_bytes()),
    ];
    for (name, bytes) in artifacts {
        let path = cfg.out.join(name);
        fs::write(&path, bytes)
            .map_err(io_err(&path))
            .at(Stage::Report)?;
        target
            .put(&format!("{REPORT_PREFIX}{name}"), bytes)
            .at(Stage::Report)?;
    }

    let timing_file = Timings {
        workers: cfg.reduce.workers,
        stages: timings
            .into_iter()
            .map(|(stage, seconds)| StageTiming { stage, seconds })
            .collect(),
    };
    let path = cfg.out.join("timings.json");
    fs::write(
        &path,
        serde_json::to_vec_pretty(&timing_file).unwrap_or_default(),
    )
    .map_err(io_err(&path))
    .at(Stage::Report)?;

    if !report.uploads.failed.is_empty() {
        return Err(PipelineError {
            stage: Stage::Upload,
            source: StageError::Other(format!(
                "{} of {} uploads failed (see report.json)",
                report.uploads.failed.len(),
                report.uploads.attempted
            )),
        });
    }

    Ok(PipelineOutput {
        triage,
        report,
        scores_csv,
        scatter_svg,
    })
}
