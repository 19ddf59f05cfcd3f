//! Metrics, the repeated-seed experiment protocol, sample dumps, and
//! efficiency sweeps.
//!
//! An experiment runs the same model over several train/test splits, one
//! per iteration, with seeds `base_seed + i`. Deduplication always happens
//! before splitting so duplicate compositions can never straddle the
//! train/test boundary. Every iteration re-splits the data, not just
//! re-initializes the model.

use std::collections::HashSet;
use std::io::{self, Write};

use serde::de::Error as _;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::baseline::{self, MlpTrainConfig};
use crate::checkpoint::SavedModel;
use crate::cpd::{self, CPTrainConfig};
use crate::neat::{self, NeatTrainConfig};
use crate::rng::Rng;
use crate::sptensor::{DedupPolicy, SparseTensor, TensorError};
use crate::tensorize::{composition_of_coord, TensorizeError};
use crate::trainer::{PredictError, TrainError, TrainReport};

/// Smoothness weight used when a `cpd_s` spec leaves it unset. On the
/// objective's per-batch-row scale this bends count-mode factors gently
/// rather than forcing them flat.
pub const CPD_S_DEFAULT_SMOOTH_LAMBDA: f64 = 10.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation needs at least one (actual, predicted) pair")]
    EmptyPairs,
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("sample count {k} exceeds the {available} test entries")]
    SampleTooLarge { k: usize, available: usize },
    #[error("iteration {iteration}: split failed: {source}")]
    Split {
        iteration: usize,
        source: TensorError,
    },
    #[error("iteration {iteration}: training failed: {source}")]
    Train {
        iteration: usize,
        source: TrainError,
    },
    #[error("iteration {iteration}: prediction failed: {source}")]
    Predict {
        iteration: usize,
        source: PredictError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decode(#[from] TensorizeError),
}

/// Aggregate error metrics over (actual, predicted) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

/// Mean absolute error over (actual, predicted) pairs.
pub fn mae(pairs: &[(f64, f64)]) -> Result<f64, EvalError> {
    Ok(metrics(pairs)?.mae)
}

pub fn metrics(pairs: &[(f64, f64)]) -> Result<Metrics, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let n = pairs.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for &(y, y_hat) in pairs {
        let r = y - y_hat;
        abs_sum += r.abs();
        sq_sum += r * r;
    }
    Ok(Metrics {
        mae: abs_sum / n,
        rmse: (sq_sum / n).sqrt(),
        count: pairs.len(),
    })
}

/// Which model to train, with its training config. `cpd` and `cpd_s` share
/// the factorization config; the kind decides whether a smoothness weight
/// is forbidden (plain `cpd`) or required, defaulting to
/// [`CPD_S_DEFAULT_SMOOTH_LAMBDA`] (`cpd_s`).
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Cpd(CPTrainConfig),
    CpdS(CPTrainConfig),
    Neat(NeatTrainConfig),
    Mlp(MlpTrainConfig),
}

pub const MODEL_KINDS: [&str; 4] = ["cpd", "cpd_s", "neat", "mlp"];

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Cpd(_) => "cpd",
            ModelSpec::CpdS(_) => "cpd_s",
            ModelSpec::Neat(_) => "neat",
            ModelSpec::Mlp(_) => "mlp",
        }
    }

    /// The seed carried by the underlying training config.
    pub fn seed(&self) -> u64 {
        match self {
            ModelSpec::Cpd(cfg) | ModelSpec::CpdS(cfg) => cfg.seed,
            ModelSpec::Neat(cfg) => cfg.seed,
            ModelSpec::Mlp(cfg) => cfg.seed,
        }
    }

    /// Default config for a kind name, if the name is known.
    pub fn default_for_kind(kind: &str) -> Option<ModelSpec> {
        match kind {
            "cpd" => Some(ModelSpec::Cpd(CPTrainConfig::default())),
            "cpd_s" => Some(ModelSpec::CpdS(CPTrainConfig::default())),
            "neat" => Some(ModelSpec::Neat(NeatTrainConfig::default())),
            "mlp" => Some(ModelSpec::Mlp(MlpTrainConfig::default())),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |msg: String| Err(EvalError::InvalidConfig(msg));
        match self {
            ModelSpec::Cpd(cfg) => {
                cfg.validate()
                    .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
                if cfg.effective_smooth_lambda() != 0.0 {
                    return bad(
                        "kind 'cpd' cannot carry a smoothness weight; use kind 'cpd_s'".into(),
                    );
                }
                Ok(())
            }
            ModelSpec::CpdS(cfg) => {
                cfg.validate()
                    .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
                if cfg.smooth_lambda == Some(0.0) {
                    return bad("kind 'cpd_s' with smooth_lambda 0 is plain cpd; \
                         set a positive weight or use kind 'cpd'"
                        .into());
                }
                Ok(())
            }
            ModelSpec::Neat(cfg) => cfg
                .validate()
                .map_err(|e| EvalError::InvalidConfig(e.to_string())),
            ModelSpec::Mlp(cfg) => cfg
                .validate()
                .map_err(|e| EvalError::InvalidConfig(e.to_string())),
        }
    }

    /// The config that will actually be trained with: the given seed is
    /// substituted in, and a `cpd_s` spec resolves its smoothness default.
    pub fn resolved(&self, seed: u64) -> ModelSpec {
        match self {
            ModelSpec::Cpd(cfg) => {
                let mut cfg = cfg.clone();
                cfg.seed = seed;
                ModelSpec::Cpd(cfg)
            }
            ModelSpec::CpdS(cfg) => {
                let mut cfg = cfg.clone();
                cfg.seed = seed;
                cfg.smooth_lambda = Some(cfg.smooth_lambda.unwrap_or(CPD_S_DEFAULT_SMOOTH_LAMBDA));
                ModelSpec::CpdS(cfg)
            }
            ModelSpec::Neat(cfg) => {
                let mut cfg = cfg.clone();
                cfg.seed = seed;
                ModelSpec::Neat(cfg)
            }
            ModelSpec::Mlp(cfg) => {
                let mut cfg = cfg.clone();
                cfg.seed = seed;
                ModelSpec::Mlp(cfg)
            }
        }
    }

    /// Initializes and trains this spec's model on `train` under the given
    /// seed. The returned [`SavedModel`] carries the resolved config.
    pub fn train(
        &self,
        train: &SparseTensor,
        seed: u64,
        val: Option<&SparseTensor>,
    ) -> Result<(SavedModel, TrainReport), TrainError> {
        match self.resolved(seed) {
            ModelSpec::Cpd(cfg) | ModelSpec::CpdS(cfg) => {
                let model = cpd::init_model(train.shape(), &cfg);
                let (model, report) = cpd::train(model, train, &cfg, val)?;
                Ok((SavedModel::Cpd(model, cfg), report))
            }
            ModelSpec::Neat(cfg) => {
                let model = neat::init_model(train.shape(), &cfg);
                let (model, report) = neat::train(model, train, &cfg, val)?;
                Ok((SavedModel::Neat(model, cfg), report))
            }
            ModelSpec::Mlp(cfg) => {
                let model = baseline::init_model(train.shape(), &cfg);
                let (model, report) = baseline::train(model, train, &cfg, val)?;
                Ok((SavedModel::Mlp(model, cfg), report))
            }
        }
    }
}

impl Serialize for ModelSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("ModelSpec", 2)?;
        s.serialize_field("kind", self.kind())?;
        match self {
            ModelSpec::Cpd(cfg) | ModelSpec::CpdS(cfg) => s.serialize_field("config", cfg)?,
            ModelSpec::Neat(cfg) => s.serialize_field("config", cfg)?,
            ModelSpec::Mlp(cfg) => s.serialize_field("config", cfg)?,
        }
        s.end()
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            kind: String,
            #[serde(default)]
            config: Option<serde_json::Value>,
        }
        let doc = Doc::deserialize(deserializer)?;
        let config = doc
            .config
            .unwrap_or_else(|| serde_json::Value::Object(Default::default()));
        let parse = D::Error::custom;
        match doc.kind.as_str() {
            "cpd" => Ok(ModelSpec::Cpd(
                serde_json::from_value(config).map_err(parse)?,
            )),
            "cpd_s" => Ok(ModelSpec::CpdS(
                serde_json::from_value(config).map_err(parse)?,
            )),
            "neat" => Ok(ModelSpec::Neat(
                serde_json::from_value(config).map_err(parse)?,
            )),
            "mlp" => Ok(ModelSpec::Mlp(
                serde_json::from_value(config).map_err(parse)?,
            )),
            other => Err(D::Error::unknown_variant(other, &MODEL_KINDS)),
        }
    }
}

fn default_iterations() -> usize {
    5
}

/// Protocol parameters for one repeated-seed experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train_count: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub base_seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.iterations < 1 {
            return Err(EvalError::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.train_count < 1 {
            return Err(EvalError::InvalidConfig("train_count must be >= 1".into()));
        }
        self.model.validate()
    }
}

/// Aggregated outcome of one experiment: per-iteration MAEs plus their
/// mean and population standard deviation, mean RMSE, and the mean
/// training wall-clock time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model_kind: String,
    pub train_count: usize,
    pub seeds: Vec<u64>,
    pub iteration_maes: Vec<f64>,
    pub mean_mae: f64,
    pub std_mae: f64,
    pub mean_rmse: f64,
    pub mean_train_seconds: f64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_std(values: &[f64], mean: f64) -> f64 {
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

/// Runs `iterations` train/evaluate rounds, re-splitting with seed
/// `base_seed + i` each time. The tensor is deduplicated (mean policy)
/// first when it still carries duplicates, so no composition can appear on
/// both sides of a split.
pub fn run_experiment(
    tensor: &SparseTensor,
    cfg: &ExperimentConfig,
) -> Result<ResultRow, EvalError> {
    cfg.validate()?;
    let deduped_storage;
    let tensor = if tensor.is_deduped() {
        tensor
    } else {
        deduped_storage = tensor.dedup(DedupPolicy::Mean).0;
        &deduped_storage
    };
    if cfg.train_count >= tensor.len() {
        return Err(EvalError::InvalidConfig(format!(
            "train_count {} leaves no test entries (dataset has {} after dedup)",
            cfg.train_count,
            tensor.len()
        )));
    }

    let mut seeds = Vec::with_capacity(cfg.iterations);
    let mut iteration_maes = Vec::with_capacity(cfg.iterations);
    let mut rmses = Vec::with_capacity(cfg.iterations);
    let mut seconds = Vec::with_capacity(cfg.iterations);
    for i in 0..cfg.iterations {
        let seed = cfg.base_seed + i as u64;
        let (train_t, test_t) =
            tensor
                .split(cfg.train_count, seed)
                .map_err(|source| EvalError::Split {
                    iteration: i,
                    source,
                })?;
        let train_coords: HashSet<&[usize]> = train_t.entries().iter().map(|e| e.coord()).collect();
        for entry in test_t.entries() {
            assert!(
                !train_coords.contains(entry.coord()),
                "split leaked coordinate {:?} into both sides",
                entry.coord()
            );
        }
        let (model, report) =
            cfg.model
                .train(&train_t, seed, None)
                .map_err(|source| EvalError::Train {
                    iteration: i,
                    source,
                })?;
        let mut pairs = Vec::with_capacity(test_t.len());
        for entry in test_t.entries() {
            let predicted = model
                .predict(entry.coord())
                .map_err(|source| EvalError::Predict {
                    iteration: i,
                    source,
                })?;
            pairs.push((entry.value(), predicted));
        }
        let m = metrics(&pairs)?;
        seeds.push(seed);
        iteration_maes.push(m.mae);
        rmses.push(m.rmse);
        seconds.push(report.train_seconds);
    }

    let mean_mae = mean(&iteration_maes);
    Ok(ResultRow {
        model_kind: cfg.model.kind().to_string(),
        train_count: cfg.train_count,
        seeds,
        std_mae: population_std(&iteration_maes, mean_mae),
        mean_mae,
        iteration_maes,
        mean_rmse: mean(&rmses),
        mean_train_seconds: mean(&seconds),
    })
}

/// One decoded test entry with its actual and predicted value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub formula: String,
    pub actual: f64,
    pub predicted: f64,
}

/// Draws `k` test entries uniformly without replacement (a seeded shuffle,
/// first `k` taken), decodes their coordinates back to formulas, and
/// predicts each.
pub fn sample_predictions(
    model: &SavedModel,
    test: &SparseTensor,
    k: usize,
    seed: u64,
) -> Result<Vec<SamplePrediction>, EvalError> {
    if k > test.len() {
        return Err(EvalError::SampleTooLarge {
            k,
            available: test.len(),
        });
    }
    let mut order: Vec<usize> = (0..test.len()).collect();
    let mut rng = Rng::for_domain(seed, "eval.samples");
    rng.shuffle(&mut order);
    let mut samples = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let entry = &test.entries()[idx];
        let composition = composition_of_coord(entry.coord(), test.shape(), test.index_map())?;
        let predicted = model
            .predict(entry.coord())
            .map_err(|source| EvalError::Predict {
                iteration: 0,
                source,
            })?;
        samples.push(SamplePrediction {
            formula: composition.to_string(),
            actual: entry.value(),
            predicted,
        });
    }
    Ok(samples)
}

/// One efficiency-sweep row: the experiment aggregate at a training size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model_kind: String,
    pub train_count: usize,
    pub mean_mae: f64,
    pub mean_train_seconds: f64,
}

/// Runs the experiment once per training size (ascending), keeping the
/// model spec, iteration count, and base seed fixed.
pub fn efficiency_sweep(
    tensor: &SparseTensor,
    cfg: &ExperimentConfig,
    train_sizes: &[usize],
) -> Result<Vec<SweepRow>, EvalError> {
    if train_sizes.is_empty() {
        return Err(EvalError::InvalidConfig(
            "sweep needs at least one training size".into(),
        ));
    }
    let mut sizes = train_sizes.to_vec();
    sizes.sort_unstable();
    let mut rows = Vec::with_capacity(sizes.len());
    for size in sizes {
        let size_cfg = ExperimentConfig {
            train_count: size,
            ..cfg.clone()
        };
        let row = run_experiment(tensor, &size_cfg)?;
        rows.push(SweepRow {
            model_kind: row.model_kind,
            train_count: row.train_count,
            mean_mae: row.mean_mae,
            mean_train_seconds: row.mean_train_seconds,
        });
    }
    Ok(rows)
}

pub const RESULTS_CSV_HEADER: &str =
    "model,train_count,iterations,seeds,mae_mean,mae_std,rmse_mean,mae_per_iteration,train_seconds_mean";

/// Writes one line per row under [`RESULTS_CSV_HEADER`]. `placeholders`
/// adds rows with the metric cells left empty, so numbers computed outside
/// this harness can be merged in by hand. The timing column comes last so
/// determinism checks can strip it.
pub fn write_results_csv(
    w: &mut impl Write,
    rows: &[ResultRow],
    placeholders: &[&str],
) -> io::Result<()> {
    writeln!(w, "{RESULTS_CSV_HEADER}")?;
    for row in rows {
        let seeds: Vec<String> = row.seeds.iter().map(u64::to_string).collect();
        let maes: Vec<String> = row.iteration_maes.iter().map(f64::to_string).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            row.model_kind,
            row.train_count,
            row.iteration_maes.len(),
            seeds.join(";"),
            row.mean_mae,
            row.std_mae,
            row.mean_rmse,
            maes.join(";"),
            row.mean_train_seconds
        )?;
    }
    for name in placeholders {
        writeln!(w, "{name},,,,,,,,")?;
    }
    Ok(())
}

pub const SAMPLES_CSV_HEADER: &str = "model,formula,actual,predicted";

/// One block of rows per model group, single header.
pub fn write_samples_csv(
    w: &mut impl Write,
    groups: &[(&str, Vec<SamplePrediction>)],
) -> io::Result<()> {
    writeln!(w, "{SAMPLES_CSV_HEADER}")?;
    for (model_kind, samples) in groups {
        for s in samples {
            writeln!(w, "{model_kind},{},{},{}", s.formula, s.actual, s.predicted)?;
        }
    }
    Ok(())
}

pub const SWEEP_CSV_HEADER: &str = "model,train_count,mae_mean,train_seconds_mean";

pub fn write_sweep_csv(w: &mut impl Write, rows: &[SweepRow]) -> io::Result<()> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{}",
            row.model_kind, row.train_count, row.mean_mae, row.mean_train_seconds
        )?;
    }
    Ok(())
}
