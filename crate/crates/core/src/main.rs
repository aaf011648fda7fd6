use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use cryoreduce::cost::{self, SpotDecision};
use cryoreduce::covariance::{CovarianceMode, DEFAULT_MEMORY_BUDGET};
use cryoreduce::ingest::{build_datastore, io_err, DataStore, STORE_MANIFEST};
use cryoreduce::mapreduce::default_workers;
use cryoreduce::pca::{load_scores, DEFAULT_EXPLAINED};
use cryoreduce::pipeline::synth::{synth_gen, write_stack, SynthFormat, SynthSpec};
use cryoreduce::pipeline::{
    load_inputs, reduce, run_pipeline, triage_and_render, ComponentChoice, PipelineConfig,
    ReduceOptions, DEFAULT_CHUNK_IMAGES,
};
use cryoreduce::triage::DEFAULT_THRESHOLD;

const EXIT_USAGE: u8 = 1;
const EXIT_STAGE: u8 = 2;
const REDUCE_MANIFEST: &str = "reduce.json";

/// Chunked PCA triage for cryo-EM image stacks.
#[derive(Parser)]
#[command(name = "cryoreduce", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load MRC stacks or raw directories into a chunked datastore.
    Ingest(IngestArgs),
    /// Covariance, correlation, SVD and scores for a datastore.
    Reduce(ReduceArgs),
    /// Label images KEEP/DISCARD from the scores written by `reduce`.
    Triage(TriageArgs),
    /// Estimate and compare cloud costs from a pricing config.
    Cost(CostArgs),
    /// Synthetic data generation.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Full pipeline: ingest, reduce, triage, upload KEEP images and reports.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Write a seeded good/junk stack plus truth.csv.
    Gen(SynthArgs),
}

#[derive(Args)]
struct InputArgs {
    /// MRC files, raw directories, manifest .csv files or globs; `reduce`
    /// also accepts a datastore directory.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<String>,
    /// Images per chunk.
    #[arg(long, default_value_t = DEFAULT_CHUNK_IMAGES as u64, value_parser = clap::value_parser!(u64).range(1..))]
    chunk_size: u64,
}

#[derive(Args)]
struct ReduceFlags {
    #[arg(long, default_value_t = default_workers() as u64, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
    #[arg(long, value_enum, default_value_t = CovarianceMode::Gram)]
    mode: CovarianceMode,
    /// Skip mean-centering.
    #[arg(long)]
    no_center: bool,
    /// Number of retained components.
    #[arg(long, conflicts_with = "explained", value_parser = clap::value_parser!(u64).range(1..))]
    components: Option<u64>,
    /// Retain the fewest components reaching this cumulative explained fraction.
    #[arg(long)]
    explained: Option<f64>,
    /// Covariance memory budget in bytes.
    #[arg(long, default_value_t = DEFAULT_MEMORY_BUDGET)]
    memory_budget: u64,
}

impl ReduceFlags {
    fn options(&self) -> Result<ReduceOptions, String> {
        let components = match (self.components, self.explained) {
            (Some(k), _) => ComponentChoice::Fixed(k as usize),
            (None, Some(f)) if f > 0.0 && f <= 1.0 => ComponentChoice::Explained(f),
            (None, Some(f)) => return Err(format!("--explained must be in (0, 1], got {f}")),
            (None, None) => ComponentChoice::Explained(DEFAULT_EXPLAINED),
        };
        Ok(ReduceOptions {
            mode: self.mode,
            center: !self.no_center,
            components,
            workers: self.workers as usize,
            memory_budget: self.memory_budget,
        })
    }
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Datastore directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReduceArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    reduce: ReduceFlags,
    /// Output directory; receives `pca/` and, for non-datastore input, `datastore/`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TriageArgs {
    /// Output directory of a previous `reduce`.
    #[arg(long)]
    input: PathBuf,
    /// Robust distance cutoff; `inf` keeps everything.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Receives scores.csv, scatter.svg and triage.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// JSON pricing config.
    #[arg(long)]
    pricing: PathBuf,
    #[arg(long)]
    data_gb: f64,
    /// Billed compute hours per instance.
    #[arg(long)]
    hours: f64,
    #[arg(long, default_value_t = 1)]
    instances: u64,
    #[arg(long, default_value_t = 1.0)]
    months: f64,
    /// Data size after reduction; adds per-scheme storage savings.
    #[arg(long)]
    reduced_gb: Option<f64>,
    /// Spot bid in dollars per instance-hour; needs --spot-price.
    #[arg(long, requires = "spot_price", value_parser = Decimal::from_str)]
    bid: Option<Decimal>,
    #[arg(long, requires = "bid", value_parser = Decimal::from_str)]
    spot_price: Option<Decimal>,
    /// Also write the JSON result here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 90)]
    good: usize,
    #[arg(long, default_value_t = 10)]
    junk: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    /// Write a float32 MRC stack (default).
    #[arg(long, conflicts_with = "raw")]
    mrc: bool,
    /// Write raw float64 files with a manifest instead.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    reduce: ReduceFlags,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    pricing: Option<PathBuf>,
    /// Object store: `local:<dir>` or a directory. Defaults to `<out>/store`.
    #[arg(long)]
    store: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Upload KEEP images from several threads.
    #[arg(long)]
    parallel_uploads: bool,
}

/// What `reduce` leaves behind for `triage`.
#[derive(Serialize, Deserialize)]
struct ReduceManifest {
    datastore: PathBuf,
    mode: CovarianceMode,
    centered: bool,
    k: usize,
}

enum Failure {
    Usage(String),
    Stage(String),
}

fn stage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Stage(e.to_string())
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_json(value: &impl Serialize) -> Result<String, Failure> {
    let text = serde_json::to_string_pretty(value).map_err(stage)?;
    emit(&text);
    Ok(text)
}

fn is_datastore(path: &Path) -> bool {
    path.join(STORE_MANIFEST).is_file()
}

/// Opens an existing datastore directory, or ingests the inputs into
/// `scratch`.
fn open_or_ingest(input: &InputArgs, scratch: &Path) -> Result<DataStore, Failure> {
    if let [single] = input.input.as_slice() {
        if is_datastore(Path::new(single)) {
            return DataStore::open(single).map_err(|e| stage(format!("[ingest] {e}")));
        }
    }
    let records = load_inputs(&input.input).map_err(|e| stage(format!("[ingest] {e}")))?;
    build_datastore(&records, input.chunk_size as usize)
        .and_then(|s| s.write_to(scratch))
        .map_err(|e| stage(format!("[ingest] {e}")))
}

fn cmd_ingest(args: IngestArgs) -> Result<(), Failure> {
    let store = open_or_ingest(&args.input, &args.out)?;
    print_json(&json!({
        "datastore": args.out,
        "images": store.image_count(),
        "width": store.width(),
        "height": store.height(),
        "chunks": store.chunks().len(),
        "chunk_images": store.chunk_images(),
        "source_bytes": store.total_source_bytes(),
    }))?;
    Ok(())
}

fn cmd_reduce(args: ReduceArgs) -> Result<(), Failure> {
    let opts = args.reduce.options().map_err(Failure::Usage)?;
    fs::create_dir_all(&args.out)
        .map_err(io_err(&args.out))
        .map_err(stage)?;
    let store = open_or_ingest(&args.input, &args.out.join("datastore"))?;
    let mut timings = Vec::new();
    let reduced = reduce(&store, &opts, &mut timings).map_err(stage)?;
    reduced
        .pca
        .save(args.out.join("pca"))
        .map_err(|e| stage(format!("[svd] {e}")))?;
    let datastore = match args.input.input.as_slice() {
        [single] if is_datastore(Path::new(single)) => PathBuf::from(single),
        _ => args.out.join("datastore"),
    };
    let manifest = ReduceManifest {
        datastore: fs::canonicalize(&datastore).unwrap_or(datastore),
        mode: reduced.mode,
        centered: opts.center,
        k: reduced.k,
    };
    let path = args.out.join(REDUCE_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest).map_err(stage)?)
        .map_err(io_err(&path))
        .map_err(stage)?;
    print_json(&json!({
        "images": store.image_count(),
        "mode": reduced.mode,
        "centered": opts.center,
        "k": reduced.k,
        "singular_values": reduced.pca.singular_values.iter().take(10).collect::<Vec<_>>(),
        "explained": reduced.pca.explained.iter().take(10).collect::<Vec<_>>(),
        "out": args.out,
    }))?;
    Ok(())
}

fn cmd_triage(args: TriageArgs) -> Result<(), Failure> {
    if args.threshold.is_nan() || args.threshold <= 0.0 {
        return Err(Failure::Usage(format!(
            "--threshold must be positive, got {}",
            args.threshold
        )));
    }
    let path = args.input.join(REDUCE_MANIFEST);
    let text = fs::read(&path).map_err(|e| {
        stage(format!(
            "[classify] {}: {e} (run `reduce` first)",
            path.display()
        ))
    })?;
    let manifest: ReduceManifest = serde_json::from_slice(&text).map_err(stage)?;
    let store = DataStore::open(&manifest.datastore).map_err(|e| stage(format!("[ingest] {e}")))?;
    let (_, scores) =
        load_scores(args.input.join("pca")).map_err(|e| stage(format!("[project] {e}")))?;
    let (report, csv, svg) = triage_and_render(&store, &scores, manifest.k, args.threshold)
        .map_err(|e| stage(format!("[classify] {e}")))?;
    fs::create_dir_all(&args.out)
        .map_err(io_err(&args.out))
        .map_err(stage)?;
    let summary = json!({
        "k": report.k,
        "threshold": if args.threshold.is_finite() { json!(args.threshold) } else { json!("inf") },
        "kept_count": report.kept().count(),
        "discarded_count": report.discarded().count(),
        "kept_fraction": report.kept_fraction,
        "kept_bytes": report.kept_bytes,
        "discarded_bytes": report.discarded_bytes,
        "discarded_ids": report.discarded().map(|r| r.id.as_str()).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&summary).map_err(stage)?;
    for (name, bytes) in [
        ("scores.csv", csv.as_bytes()),
        ("scatter.svg", svg.as_bytes()),
        ("triage.json", text.as_bytes()),
    ] {
        let p = args.out.join(name);
        fs::write(&p, bytes).map_err(io_err(&p)).map_err(stage)?;
    }
    emit(&text);
    Ok(())
}

fn cmd_cost(args: CostArgs) -> Result<(), Failure> {
    let schemes = cost::load_pricing(&args.pricing).map_err(stage)?;
    let workload = cost::Workload::new(args.data_gb, args.hours, args.instances, args.months)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let ranked = cost::compare(&schemes, &workload).map_err(stage)?;
    let mut out = json!({
        "workload": workload,
        "ranking": ranked.iter().map(|r| json!({
            "scheme": r.estimate.scheme,
            "total_dollars": cost::format_cents(r.estimate.total_dollars),
            "savings_pct": r.savings_pct,
            "breakdown": r.estimate.breakdown,
        })).collect::<Vec<_>>(),
    });
    if let Some(after) = args.reduced_gb {
        let after = cost::decimal_from_f64("reduced_gb", after)
            .map_err(|e| Failure::Usage(e.to_string()))?;
        let savings = schemes
            .iter()
            .map(|s| {
                cost::reduction_savings(
                    workload.data_gb,
                    after,
                    s.storage_rate,
                    workload.storage_months,
                )
                .map(|v| json!({ "scheme": s.name, "savings_dollars": cost::format_cents(v) }))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::Usage(e.to_string()))?;
        out["reduction_savings"] = json!(savings);
    }
    if let (Some(bid), Some(price)) = (args.bid, args.spot_price) {
        let decision = cost::spot_decision(bid, price);
        out["spot"] = json!({
            "bid": bid.to_string(),
            "price": price.to_string(),
            "decision": decision,
            "running": decision == SpotDecision::Start,
        });
    }
    let text = print_json(&out)?;
    if let Some(path) = args.out {
        fs::write(&path, text)
            .map_err(io_err(&path))
            .map_err(stage)?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        seed: args.seed,
        good: args.good,
        junk: args.junk,
        width: args.width,
        height: args.height,
    };
    let stack = synth_gen(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    let format = if args.raw {
        SynthFormat::Raw
    } else {
        SynthFormat::Mrc
    };
    let input = write_stack(&stack, &args.out, format).map_err(stage)?;
    print_json(&json!({
        "input": input,
        "images": stack.images.len(),
        "junk": stack.junk_ids(),
    }))?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    if args.threshold.is_nan() || args.threshold <= 0.0 {
        return Err(Failure::Usage(format!(
            "--threshold must be positive, got {}",
            args.threshold
        )));
    }
    let store = args
        .store
        .clone()
        .unwrap_or_else(|| format!("local:{}", args.out.join("store").display()));
    let mut cfg = PipelineConfig::new(args.input.input.clone(), &args.out, store);
    cfg.chunk_images = args.input.chunk_size as usize;
    cfg.reduce = args.reduce.options().map_err(Failure::Usage)?;
    cfg.threshold = args.threshold;
    cfg.pricing = args.pricing;
    cfg.parallel_uploads = args.parallel_uploads;
    let output = run_pipeline(&cfg).map_err(stage)?;
    let r = &output.report;
    print_json(&json!({
        "out": args.out,
        "images": r.image_count,
        "k": r.k,
        "kept_count": r.kept_count,
        "discarded_count": r.discarded_count,
        "kept_fraction": r.kept_fraction,
        "uploaded": r.uploads.succeeded.len(),
    }))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Reduce(a) => cmd_reduce(a),
        Command::Triage(a) => cmd_triage(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Synth {
            command: SynthCommand::Gen(a),
        } => cmd_synth(a),
        Command::Run(a) => cmd_run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Stage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
