//! Command line front end for the matten models: encode composition
//! datasets into sparse tensors, train and apply completion models, and
//! run the repeated-split benchmark and the training-size sweep.
//!
//! Every failure is printed to stderr as one JSON object and mapped to a
//! stable exit code: 2 for a bad config, 3 for a dataset or artifact
//! problem, 4 for training divergence, 1 for anything else.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use matten_core::checkpoint::{Checkpoint, CheckpointError, TensorMeta};
use matten_core::eval::{
    efficiency_sweep, run_experiment, sample_predictions, write_results_csv, write_samples_csv,
    write_sweep_csv, EvalError, ExperimentConfig, ModelSpec, ResultRow, SamplePrediction, SweepRow,
};
use matten_core::sptensor::{DedupPolicy, SparseTensor, TensorError};
use matten_core::tensorize::{
    read_records_csv, tensorize, CountPolicy, NonIntegerPolicy, SkipReport, TensorizeConfig,
    TensorizeError,
};
use matten_core::trainer::TrainError;

/// Sparse tensor models for material property prediction.
#[derive(Parser)]
#[command(name = "matten", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a formula,value CSV into a sparse tensor file.
    Tensorize(TensorizeArgs),
    /// Train one model on a tensor file and write a checkpoint.
    Train(TrainArgs),
    /// Predict a composition's value from a checkpoint.
    Predict(PredictArgs),
    /// Run the repeated-split benchmark described by a run config.
    Benchmark(BenchmarkArgs),
    /// Measure accuracy and training time across training-set sizes.
    Sweep(SweepArgs),
}

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATASET: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

/// Process-level failure: an exit code, a short machine-readable kind, and
/// a message. Printed to stderr as `{"error":{...}}`.
#[derive(Debug)]
struct CliError {
    code: u8,
    kind: &'static str,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            kind: "config",
            message: message.into(),
        }
    }

    fn dataset(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATASET,
            kind: "dataset",
            message: message.into(),
        }
    }

    fn divergence(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DIVERGENCE,
            kind: "divergence",
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_OTHER,
            kind: "io",
            message: message.into(),
        }
    }

    fn to_json(&self) -> String {
        json!({
            "error": {
                "code": self.code,
                "kind": self.kind,
                "message": self.message,
            }
        })
        .to_string()
    }
}

impl From<TensorizeError> for CliError {
    fn from(e: TensorizeError) -> Self {
        match e {
            TensorizeError::InvalidConfig(_) => CliError::config(e.to_string()),
            _ => CliError::dataset(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::dataset(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::divergence(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::config(e.to_string()),
            TrainError::Data(_) => CliError::dataset(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match &e {
            EvalError::InvalidConfig(_) | EvalError::SampleTooLarge { .. } => {
                CliError::config(e.to_string())
            }
            EvalError::Train { source, .. } => match source {
                TrainError::Divergence { .. } => CliError::divergence(e.to_string()),
                TrainError::InvalidConfig(_) => CliError::config(e.to_string()),
                TrainError::Data(_) => CliError::dataset(e.to_string()),
            },
            _ => CliError::dataset(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::dataset(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Tensorize(args) => cmd_tensorize(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

/// Writes through a sibling `.tmp` file and renames into place, so a
/// crashed run never leaves a half-written artifact under the final name.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(".tmp");
    let tmp = PathBuf::from(tmp_name);
    fs::write(&tmp, contents).map_err(|e| CliError::io(format!("write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| {
        CliError::io(format!(
            "rename {} to {}: {e}",
            tmp.display(),
            path.display()
        ))
    })
}

fn read_config_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn pretty_json(value: &serde_json::Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    text
}

// ---------------------------------------------------------------------------
// tensorize

#[derive(Args)]
struct TensorizeArgs {
    /// Input CSV with a formula,value header.
    #[arg(long)]
    input: PathBuf,
    /// Tensor file to write.
    #[arg(long)]
    output: PathBuf,
    /// Also write the skip report here (it always goes to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Distinct elements per material.
    #[arg(long, default_value_t = 2)]
    arity: usize,
    /// Largest representable atom count per element.
    #[arg(long, default_value_t = 8)]
    max_count: usize,
    /// Counts above max-count: skip or clip.
    #[arg(long, default_value = "skip")]
    count_policy: String,
    /// Fractional counts: skip or round.
    #[arg(long, default_value = "skip")]
    noninteger_policy: String,
    /// Duplicate compositions: mean, first, or drop_all.
    #[arg(long, default_value = "mean")]
    dedup_policy: String,
    /// Accept element-like symbols outside the periodic table.
    #[arg(long)]
    allow_unknown_symbols: bool,
}

fn parse_count_policy(s: &str) -> Result<CountPolicy, CliError> {
    match s {
        "skip" => Ok(CountPolicy::Skip),
        "clip" => Ok(CountPolicy::Clip),
        _ => Err(CliError::config(format!(
            "unknown count policy {s:?}; expected skip or clip"
        ))),
    }
}

fn parse_noninteger_policy(s: &str) -> Result<NonIntegerPolicy, CliError> {
    match s {
        "skip" => Ok(NonIntegerPolicy::Skip),
        "round" => Ok(NonIntegerPolicy::Round),
        _ => Err(CliError::config(format!(
            "unknown non-integer policy {s:?}; expected skip or round"
        ))),
    }
}

fn parse_dedup_policy(s: &str) -> Result<DedupPolicy, CliError> {
    match s {
        "mean" => Ok(DedupPolicy::Mean),
        "first" => Ok(DedupPolicy::First),
        "drop_all" => Ok(DedupPolicy::DropAll),
        _ => Err(CliError::config(format!(
            "unknown dedup policy {s:?}; expected mean, first, or drop_all"
        ))),
    }
}

fn cmd_tensorize(args: TensorizeArgs) -> Result<(), CliError> {
    let cfg = TensorizeConfig {
        arity: args.arity,
        max_count: args.max_count,
        count_policy: parse_count_policy(&args.count_policy)?,
        noninteger_policy: parse_noninteger_policy(&args.noninteger_policy)?,
        dedup_policy: parse_dedup_policy(&args.dedup_policy)?,
        validate_symbols: !args.allow_unknown_symbols,
    };
    cfg.validate()?;
    let file = File::open(&args.input)
        .map_err(|e| CliError::dataset(format!("{}: {e}", args.input.display())))?;
    let records = read_records_csv(file)?;
    let (tensor, report) = tensorize(&records, &cfg)?;
    write_atomic(&args.output, &tensor.to_text())?;
    let doc = json!({ "config": cfg, "report": report });
    let text = pretty_json(&doc);
    print!("{text}");
    if let Some(path) = &args.report {
        write_atomic(path, &text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    /// Tensor file produced by tensorize.
    #[arg(long)]
    tensor: PathBuf,
    /// Model kind: cpd, cpd_s, neat, or mlp.
    #[arg(long)]
    model: String,
    /// JSON file with the kind's training config; defaults apply when
    /// omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint file to write.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write the training report here (it always goes to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

fn model_spec_from_parts(kind: &str, config: Option<&Path>) -> Result<ModelSpec, CliError> {
    let config_value = match config {
        Some(path) => serde_json::from_str::<serde_json::Value>(&read_config_text(path)?)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?,
        None => json!({}),
    };
    let spec: ModelSpec = serde_json::from_value(json!({ "kind": kind, "config": config_value }))
        .map_err(|e| CliError::config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let spec = model_spec_from_parts(&args.model, args.config.as_deref())?;
    let seed = args.seed.unwrap_or_else(|| spec.seed());
    let tensor = SparseTensor::load(&args.tensor)
        .map_err(|e| CliError::dataset(format!("{}: {e}", args.tensor.display())))?;
    let (saved, report) = spec.train(&tensor, seed, None)?;
    let checkpoint = Checkpoint::new(TensorMeta::of_tensor(&tensor), saved)?;
    write_atomic(&args.checkpoint, &checkpoint.to_text())?;
    let doc = json!({
        "model": spec.resolved(seed),
        "seed": seed,
        "report": report,
    });
    let text = pretty_json(&doc);
    print!("{text}");
    if let Some(path) = &args.report {
        write_atomic(path, &text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// predict

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint file written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Composition formula, e.g. AuBr3.
    #[arg(long)]
    formula: String,
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(&args.checkpoint)
        .map_err(|e| CliError::dataset(format!("{}: {e}", args.checkpoint.display())))?;
    let value = checkpoint.predict_formula(&args.formula)?;
    println!("{value}");
    Ok(())
}

// ---------------------------------------------------------------------------
// benchmark and sweep

/// Everything a benchmark or sweep run needs, as one JSON file. The config
/// is echoed into report.json, so a rerun from that echo reproduces the
/// same artifacts byte for byte (timing columns aside).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Free-form run label, echoed into report.json.
    #[serde(default)]
    name: Option<String>,
    /// Input CSV with a formula,value header.
    dataset: PathBuf,
    #[serde(default)]
    tensorize: TensorizeConfig,
    models: Vec<ModelSpec>,
    train_count: usize,
    #[serde(default = "default_iterations")]
    iterations: usize,
    #[serde(default)]
    base_seed: u64,
    /// Held-out entries decoded back to formulas in samples.csv.
    #[serde(default = "default_sample_count")]
    sample_count: usize,
    /// Training sizes for the sweep subcommand.
    #[serde(default)]
    sweep_sizes: Vec<usize>,
    /// Artifact directory; the --out-dir flag wins over this.
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

fn default_iterations() -> usize {
    5
}

fn default_sample_count() -> usize {
    5
}

impl RunConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.models.is_empty() {
            return Err(CliError::config("run config needs at least one model"));
        }
        self.tensorize.validate()?;
        for model in &self.models {
            model.validate()?;
        }
        if self.train_count < 1 {
            return Err(CliError::config("train_count must be >= 1"));
        }
        if self.iterations < 1 {
            return Err(CliError::config("iterations must be >= 1"));
        }
        Ok(())
    }

    fn experiment_for(&self, model: &ModelSpec) -> ExperimentConfig {
        ExperimentConfig {
            model: model.clone(),
            train_count: self.train_count,
            iterations: self.iterations,
            base_seed: self.base_seed,
        }
    }
}

fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = read_config_text(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<(SparseTensor, SkipReport), CliError> {
    let file = File::open(&cfg.dataset)
        .map_err(|e| CliError::dataset(format!("{}: {e}", cfg.dataset.display())))?;
    let records = read_records_csv(file)?;
    Ok(tensorize(&records, &cfg.tensorize)?)
}

fn resolve_out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = flag
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Directory for results.csv, samples.csv, and report.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// results.csv rows for baselines computed outside this binary; their
/// metric cells are left empty so numbers can be merged in by hand.
const EXTERNAL_BASELINE_ROWS: [&str; 2] = ["gradient_boosting", "xgboost"];

fn cmd_benchmark(args: BenchmarkArgs) -> Result<(), CliError> {
    let cfg = load_run_config(&args.config)?;
    let out_dir = resolve_out_dir(args.out_dir, &cfg)?;
    let (tensor, skip_report) = load_dataset(&cfg)?;

    let mut rows: Vec<ResultRow> = Vec::with_capacity(cfg.models.len());
    let mut samples: Vec<(&str, Vec<SamplePrediction>)> = Vec::new();
    for model in &cfg.models {
        let row = run_experiment(&tensor, &cfg.experiment_for(model))?;
        println!(
            "{} train_count={} mae={:.6} (+/- {:.6})",
            row.model_kind, row.train_count, row.mean_mae, row.std_mae
        );
        rows.push(row);
        if cfg.sample_count > 0 {
            // Retrain on the first iteration's split; training is seeded,
            // so these rows match the first MAE column of results.csv.
            let (train_t, test_t) = tensor.split(cfg.train_count, cfg.base_seed)?;
            let (trained, _) = model.train(&train_t, cfg.base_seed, None)?;
            let s = sample_predictions(&trained, &test_t, cfg.sample_count, cfg.base_seed)?;
            samples.push((model.kind(), s));
        }
    }

    let mut results_csv = Vec::new();
    write_results_csv(&mut results_csv, &rows, &EXTERNAL_BASELINE_ROWS)
        .expect("writing to a vec cannot fail");
    write_atomic(
        &out_dir.join("results.csv"),
        std::str::from_utf8(&results_csv).expect("csv is utf8"),
    )?;

    let mut samples_csv = Vec::new();
    write_samples_csv(&mut samples_csv, &samples).expect("writing to a vec cannot fail");
    write_atomic(
        &out_dir.join("samples.csv"),
        std::str::from_utf8(&samples_csv).expect("csv is utf8"),
    )?;

    let report = json!({
        "command": "benchmark",
        "config": cfg,
        "skip_report": skip_report,
        "results": rows,
    });
    write_atomic(&out_dir.join("report.json"), &pretty_json(&report))?;
    Ok(())
}

#[derive(Args)]
struct SweepArgs {
    /// Run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Training sizes, comma separated; overrides sweep_sizes in the
    /// config.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Directory for sweep.csv and report.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let mut cfg = load_run_config(&args.config)?;
    if !args.sizes.is_empty() {
        cfg.sweep_sizes = args.sizes;
    }
    if cfg.sweep_sizes.is_empty() {
        return Err(CliError::config(
            "no sweep sizes: set sweep_sizes in the config or pass --sizes",
        ));
    }
    let out_dir = resolve_out_dir(args.out_dir, &cfg)?;
    let (tensor, skip_report) = load_dataset(&cfg)?;

    let mut all_rows: Vec<SweepRow> = Vec::new();
    for model in &cfg.models {
        let rows = efficiency_sweep(&tensor, &cfg.experiment_for(model), &cfg.sweep_sizes)?;
        for row in &rows {
            println!(
                "{} train_count={} mae={:.6} train_seconds={:.3}",
                row.model_kind, row.train_count, row.mean_mae, row.mean_train_seconds
            );
        }
        all_rows.extend(rows);
    }

    let mut sweep_csv = Vec::new();
    write_sweep_csv(&mut sweep_csv, &all_rows).expect("writing to a vec cannot fail");
    write_atomic(
        &out_dir.join("sweep.csv"),
        std::str::from_utf8(&sweep_csv).expect("csv is utf8"),
    )?;

    let report = json!({
        "command": "sweep",
        "config": cfg,
        "skip_report": skip_report,
        "sweep": all_rows,
    });
    write_atomic(&out_dir.join("report.json"), &pretty_json(&report))?;
    Ok(())
}
