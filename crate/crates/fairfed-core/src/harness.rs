//! Experiment harness: single runs, grid sweeps with multi-seed averaging,
//! and table/plot-data emission.
//!
//! Every run is keyed by a hash of its full config; artifacts land in
//! `<out>/<hash>/` (config.json, report.jsonl, record.json) so reruns are
//! skipped unless forced and every summary number traces back to per-seed
//! round reports. Sweeps run cells in parallel; determinism within a run is
//! untouched because all randomness derives from the per-run seed.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::debias::DebiasStrategy;
use crate::fed::{EngineConfig, FedEngine, FedError, RunResult, TrainOpts};
use crate::ingest::{
    self, hex_prefix, IngestError, PreparedDataset, Schema, SplitSpec,
};
use crate::metrics::MetricKind;
use crate::partition::{
    dirichlet_partition_with, single_group_partition, ClientPartition, GroupBy,
    PartitionError, DEFAULT_MIN_ROWS,
};
use crate::report::{self, ReportError};
use crate::rng::derive_seed;

/// Rounds averaged into a run's headline numbers (or fewer, for short runs).
const SUMMARY_WINDOW: usize = 5;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown method token {0:?}")]
    UnknownMethod(String),
    #[error("run {0} is locked; another worker may be on it (remove the .lock file if stale)")]
    Locked(String),
    #[error("no runs found under {0}")]
    NoRuns(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad JSON in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

/// How the training rows are spread over clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PartitionSpec {
    Dirichlet {
        alpha: f64,
        #[serde(default = "default_group_by")]
        group_by: GroupBy,
        #[serde(default = "default_min_rows")]
        min_rows: usize,
    },
    /// Every client holds rows of a single sensitive group.
    SingleGroup {
        unprivileged_clients: usize,
        privileged_clients: usize,
    },
}

fn default_group_by() -> GroupBy {
    GroupBy::Sensitive
}

fn default_min_rows() -> usize {
    DEFAULT_MIN_ROWS
}

impl PartitionSpec {
    pub fn alpha(&self) -> Option<f64> {
        match self {
            PartitionSpec::Dirichlet { alpha, .. } => Some(*alpha),
            PartitionSpec::SingleGroup { .. } => None,
        }
    }
}

/// One experiment: dataset, partition, method, engine knobs, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Builtin generator name (`adult-synth`, `compas-synth`) or a CSV path.
    pub dataset: String,
    /// Schema JSON path; required when `dataset` is a CSV path.
    pub schema: Option<String>,
    /// Row count for builtin generators; ignored for CSV datasets.
    pub rows: usize,
    pub metric: MetricKind,
    pub method: String,
    pub k: usize,
    pub partition: PartitionSpec,
    pub beta: f64,
    pub eta: f64,
    pub rounds: u32,
    pub train: TrainOpts,
    pub fairbatch_step: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub subsample: Option<usize>,
    /// Explicit per-client debias strategies, overriding the method token's
    /// layout (the token still decides whether the budget applies).
    pub assignment: Option<Vec<DebiasStrategy>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "adult-synth".to_string(),
            schema: None,
            rows: ingest::synth::DEFAULT_ROWS,
            metric: MetricKind::Eod,
            method: "fedavg".to_string(),
            k: 5,
            partition: PartitionSpec::Dirichlet {
                alpha: 0.5,
                group_by: GroupBy::Sensitive,
                min_rows: DEFAULT_MIN_ROWS,
            },
            beta: 1.0,
            eta: 1.0,
            rounds: 30,
            train: TrainOpts::default(),
            fairbatch_step: 0.01,
            test_fraction: 0.3,
            seed: 0,
            subsample: None,
            assignment: None,
        }
    }
}

impl RunConfig {
    /// Hex digest of the canonical JSON form; keys run directories.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        hex_prefix(&digest, 16)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.dataset.is_empty() {
            return Err(HarnessError::InvalidConfig("empty dataset".into()));
        }
        if !ingest::synth::is_builtin(&self.dataset) && self.schema.is_none() {
            return Err(HarnessError::InvalidConfig(format!(
                "dataset {:?} is a CSV path and needs a schema",
                self.dataset
            )));
        }
        if self.k == 0 {
            return Err(HarnessError::InvalidConfig("k must be at least 1".into()));
        }
        if let PartitionSpec::SingleGroup {
            unprivileged_clients,
            privileged_clients,
        } = self.partition
        {
            if unprivileged_clients + privileged_clients != self.k {
                return Err(HarnessError::InvalidConfig(format!(
                    "single-group clients {} + {} must equal k = {}",
                    unprivileged_clients, privileged_clients, self.k
                )));
            }
        }
        if let Some(assignment) = &self.assignment {
            if assignment.len() != self.k {
                return Err(HarnessError::InvalidConfig(format!(
                    "assignment lists {} strategies for k = {} clients",
                    assignment.len(),
                    self.k
                )));
            }
        }
        Method::parse(&self.method, self.k)?;
        Ok(())
    }
}

/// Parsed method token. The token picks the debias strategy layout and
/// whether the fairness budget is active; `fedavg` is literally `fairfed`
/// with the budget forced to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    FedAvg,
    LocalRw,
    GlobalRw,
    FairBatch,
    FairFed,
    FairFedRw,
    FairFedGlobalRw,
    FairFedFairBatch,
    /// FairFed with only a fraction of clients debiasing locally; the rest
    /// run plain (`mixed:<f>`) or FairBatch (`mixed:<f>:fairbatch`).
    Mixed { fraction: f64, rest_fairbatch: bool },
}

impl Method {
    pub fn parse(token: &str, k: usize) -> Result<Method, HarnessError> {
        let method = match token {
            "fedavg" => Method::FedAvg,
            "local-rw" => Method::LocalRw,
            "global-rw" => Method::GlobalRw,
            "fairbatch" => Method::FairBatch,
            "fairfed" => Method::FairFed,
            "fairfed-rw" => Method::FairFedRw,
            "fairfed-global-rw" => Method::FairFedGlobalRw,
            "fairfed-fairbatch" => Method::FairFedFairBatch,
            _ => {
                let Some(rest) = token.strip_prefix("mixed:") else {
                    return Err(HarnessError::UnknownMethod(token.to_string()));
                };
                let (frac_str, rest_fairbatch) = match rest.strip_suffix(":fairbatch") {
                    Some(f) => (f, true),
                    None => (rest, false),
                };
                let fraction: f64 = frac_str
                    .parse()
                    .map_err(|_| HarnessError::UnknownMethod(token.to_string()))?;
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(HarnessError::UnknownMethod(token.to_string()));
                }
                Method::Mixed {
                    fraction,
                    rest_fairbatch,
                }
            }
        };
        if k == 0 {
            return Err(HarnessError::InvalidConfig("k must be at least 1".into()));
        }
        Ok(method)
    }

    /// Whether the fairness budget applies (FairFed family) or is zeroed
    /// (plain baselines).
    pub fn uses_budget(&self) -> bool {
        matches!(
            self,
            Method::FairFed
                | Method::FairFedRw
                | Method::FairFedGlobalRw
                | Method::FairFedFairBatch
                | Method::Mixed { .. }
        )
    }

    /// Per-client debias assignment. Mixed layouts draw `round(fraction * k)`
    /// local-reweighing adopters by a seeded shuffle, so adopter identity
    /// varies across seeds like everything else.
    pub fn strategies(&self, k: usize, seed: u64) -> Vec<DebiasStrategy> {
        match self {
            Method::FedAvg | Method::FairFed => vec![DebiasStrategy::None; k],
            Method::LocalRw | Method::FairFedRw => vec![DebiasStrategy::LocalReweigh; k],
            Method::GlobalRw | Method::FairFedGlobalRw => {
                vec![DebiasStrategy::GlobalReweigh; k]
            }
            Method::FairBatch | Method::FairFedFairBatch => {
                vec![DebiasStrategy::Fairbatch; k]
            }
            Method::Mixed {
                fraction,
                rest_fairbatch,
            } => {
                let adopters = ((fraction * k as f64).round() as usize).min(k);
                let rest = if *rest_fairbatch {
                    DebiasStrategy::Fairbatch
                } else {
                    DebiasStrategy::None
                };
                let mut order: Vec<usize> = (0..k).collect();
                use rand::seq::SliceRandom;
                order.shuffle(&mut crate::rng::derive_rng(
                    seed,
                    "debias-assignment",
                    &[],
                ));
                let mut strategies = vec![rest; k];
                for &client in order.iter().take(adopters) {
                    strategies[client] = DebiasStrategy::LocalReweigh;
                }
                strategies
            }
        }
    }
}

/// Headline numbers for one run: train metrics averaged over the trailing
/// window of rounds, test metrics from the final round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub method: String,
    pub alpha: Option<f64>,
    pub beta: f64,
    pub eta: f64,
    pub lr: f64,
    pub seed: u64,
    pub rounds: u32,
    pub acc: f64,
    pub eod: Option<f64>,
    pub spd: Option<f64>,
    pub std_acc: f64,
    pub test_acc: f64,
    pub test_eod: Option<f64>,
    pub test_spd: Option<f64>,
    pub fallback_rounds: usize,
    pub undefined_fk_events: u64,
}

/// A finished in-process run: the record plus everything it was built from.
pub struct RunOutput {
    pub record: RunRecord,
    pub result: RunResult,
    pub partition: ClientPartition,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean over rounds of an optional metric; None when never defined.
fn mean_defined(xs: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = xs.iter().filter_map(|x| *x).collect();
    if defined.is_empty() {
        None
    } else {
        Some(mean(&defined))
    }
}

fn summarize_run(cfg: &RunConfig, effective: &EngineConfig, result: &RunResult) -> RunRecord {
    let window = SUMMARY_WINDOW.min(result.rows.len());
    let tail = &result.rows[result.rows.len() - window..];
    let last = result.rows.last().expect("at least one round");
    RunRecord {
        config_hash: cfg.config_hash(),
        method: cfg.method.clone(),
        alpha: cfg.partition.alpha(),
        beta: effective.beta,
        eta: cfg.eta,
        lr: cfg.train.learning_rate,
        seed: cfg.seed,
        rounds: cfg.rounds,
        acc: mean(&tail.iter().map(|r| r.acc_global).collect::<Vec<_>>()),
        eod: mean_defined(&tail.iter().map(|r| r.eod).collect::<Vec<_>>()),
        spd: mean_defined(&tail.iter().map(|r| r.spd).collect::<Vec<_>>()),
        std_acc: mean(&tail.iter().map(|r| r.std_acc).collect::<Vec<_>>()),
        test_acc: last.test.acc,
        test_eod: last.test.eod,
        test_spd: last.test.spd,
        fallback_rounds: result.fallback_rounds.len(),
        undefined_fk_events: result.undefined_fk_events,
    }
}

/// Loads and prepares the dataset a config names. Builtin generators are
/// seeded from the run seed, so every seed sees a fresh draw; CSV datasets
/// vary only in split and partition.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<PreparedDataset, HarnessError> {
    let split = SplitSpec {
        test_fraction: cfg.test_fraction,
        seed: derive_seed(cfg.seed, "split", &[]),
    };
    if ingest::synth::is_builtin(&cfg.dataset) {
        let (csv, schema) = ingest::synth::generate(
            &cfg.dataset,
            cfg.rows,
            derive_seed(cfg.seed, "dataset-synth", &[]),
        )?;
        let loaded = ingest::load_csv_text(&csv, &schema)?;
        Ok(ingest::prepare_table(&loaded, &schema, &split, &cfg.dataset)?)
    } else {
        let schema_path = cfg
            .schema
            .as_ref()
            .ok_or_else(|| HarnessError::InvalidConfig("missing schema".into()))?;
        let schema_text = fs::read_to_string(schema_path)?;
        let schema: Schema =
            serde_json::from_str(&schema_text).map_err(|source| HarnessError::Json {
                path: schema_path.clone(),
                source,
            })?;
        Ok(ingest::prepare_csv(Path::new(&cfg.dataset), &schema, &split)?)
    }
}

fn build_partition(
    cfg: &RunConfig,
    prepared: &PreparedDataset,
) -> Result<ClientPartition, HarnessError> {
    let seed = derive_seed(cfg.seed, "partition", &[]);
    let partition = match cfg.partition {
        PartitionSpec::Dirichlet {
            alpha,
            group_by,
            min_rows,
        } => dirichlet_partition_with(&prepared.train, cfg.k, alpha, group_by, seed, min_rows)?,
        PartitionSpec::SingleGroup {
            unprivileged_clients,
            privileged_clients,
        } => single_group_partition(
            &prepared.train,
            unprivileged_clients,
            privileged_clients,
            seed,
        )?,
    };
    Ok(partition)
}

/// Runs one experiment in process, no filesystem involved.
pub fn run_once(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let method = Method::parse(&cfg.method, cfg.k)?;
    let prepared = prepare_dataset(cfg)?;
    let partition = build_partition(cfg, &prepared)?;
    let engine_cfg = EngineConfig {
        metric: cfg.metric,
        beta: if method.uses_budget() { cfg.beta } else { 0.0 },
        eta: cfg.eta,
        rounds: cfg.rounds,
        train: cfg.train,
        fairbatch_step: cfg.fairbatch_step,
        seed: cfg.seed,
        subsample: cfg.subsample,
    };
    let strategies = match &cfg.assignment {
        Some(list) => list.clone(),
        None => method.strategies(cfg.k, cfg.seed),
    };
    let engine = FedEngine::setup(engine_cfg, &prepared, &partition, &strategies)?;
    let result = engine.run()?;
    let record = summarize_run(cfg, &engine_cfg, &result);
    Ok(RunOutput {
        record,
        result,
        partition,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Runs a config against an output directory: `<out>/<hash>/` gets
/// config.json, partition.json, report.jsonl, and record.json. A completed
/// run (record.json present) is reused unless `force`; a .lock file marks a
/// run in flight.
pub fn run_cached(cfg: &RunConfig, out: &Path, force: bool) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let dir = out.join(&hash);
    let record_path = dir.join("record.json");
    if record_path.exists() && !force {
        return read_json(&record_path);
    }
    fs::create_dir_all(&dir)?;
    let lock_path = dir.join(".lock");
    match fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock_path)
    {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            return Err(HarnessError::Locked(hash));
        }
        Err(e) => return Err(e.into()),
    }
    let outcome = (|| {
        let output = run_once(cfg)?;
        write_json(&dir.join("config.json"), cfg)?;
        fs::write(dir.join("partition.json"), output.partition.to_json())?;
        report::write_jsonl_file(&dir.join("report.jsonl"), &output.result.rows)?;
        write_json(&record_path, &output.record)?;
        Ok(output.record)
    })();
    let _ = fs::remove_file(&lock_path);
    outcome
}

/// Grid sweep: cells are method x alpha x beta x eta; each cell runs every
/// learning rate over every seed, then keeps the rate with the best fairness
/// among rates of comparable accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub methods: Vec<String>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub etas: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            base: RunConfig::default(),
            methods: vec!["fedavg".to_string(), "fairfed-rw".to_string()],
            alphas: vec![0.5],
            betas: vec![1.0],
            etas: vec![1.0],
            learning_rates: vec![0.01],
            seeds: (0..20).collect(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.methods.is_empty()
            || self.betas.is_empty()
            || self.etas.is_empty()
            || self.learning_rates.is_empty()
        {
            return Err(HarnessError::InvalidConfig("empty sweep grid".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig("at least one seed".into()));
        }
        if self.alphas.is_empty()
            && matches!(self.base.partition, PartitionSpec::Dirichlet { .. })
        {
            return Err(HarnessError::InvalidConfig(
                "a dirichlet sweep needs at least one alpha".into(),
            ));
        }
        for method in &self.methods {
            Method::parse(method, self.base.k)?;
        }
        Ok(())
    }

    /// Alpha axis of the grid: empty means the base partition is not swept
    /// (single-group partitions have no alpha).
    fn alpha_axis(&self) -> Vec<Option<f64>> {
        if self.alphas.is_empty() {
            vec![None]
        } else {
            self.alphas.iter().map(|&a| Some(a)).collect()
        }
    }

    /// All run configs in deterministic grid order.
    pub fn expand(&self) -> Vec<RunConfig> {
        let mut configs = Vec::new();
        for method in &self.methods {
            for alpha in self.alpha_axis() {
                for &beta in &self.betas {
                    for &eta in &self.etas {
                        for &lr in &self.learning_rates {
                            for &seed in &self.seeds {
                                let mut cfg = self.base.clone();
                                cfg.method = method.clone();
                                if let (
                                    Some(alpha),
                                    PartitionSpec::Dirichlet {
                                        alpha: ref mut a, ..
                                    },
                                ) = (alpha, &mut cfg.partition)
                                {
                                    *a = alpha;
                                }
                                cfg.beta = beta;
                                cfg.eta = eta;
                                cfg.train.learning_rate = lr;
                                cfg.seed = seed;
                                configs.push(cfg);
                            }
                        }
                    }
                }
            }
        }
        configs
    }
}

/// Seed-aggregated numbers for one grid cell at its selected learning rate.
/// `eod_mean` is the signed seed average; `eod_abs_mean` averages |EOD| per
/// seed, which is what trend comparisons use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub alpha: Option<f64>,
    pub beta: f64,
    pub eta: f64,
    pub lr: f64,
    pub n_seeds: usize,
    pub acc_mean: f64,
    pub acc_se: f64,
    pub eod_mean: Option<f64>,
    pub eod_se: Option<f64>,
    pub eod_abs_mean: Option<f64>,
    pub eod_abs_se: Option<f64>,
    pub spd_mean: Option<f64>,
    pub spd_se: Option<f64>,
    pub std_acc_mean: f64,
    pub std_acc_se: f64,
    pub test_acc_mean: f64,
    pub test_eod_abs_mean: Option<f64>,
}

/// Standard error of the mean (sample std over sqrt n); zero under two
/// observations.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

fn aggregate_stat(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        (None, None)
    } else {
        (Some(mean(&defined)), Some(standard_error(&defined)))
    }
}

/// Collapses one cell's records (one per seed) at a single learning rate.
fn aggregate_cell(records: &[&RunRecord]) -> CellSummary {
    let first = records[0];
    let accs: Vec<f64> = records.iter().map(|r| r.acc).collect();
    let stds: Vec<f64> = records.iter().map(|r| r.std_acc).collect();
    let (eod_mean, eod_se) = aggregate_stat(&records.iter().map(|r| r.eod).collect::<Vec<_>>());
    let (eod_abs_mean, eod_abs_se) =
        aggregate_stat(&records.iter().map(|r| r.eod.map(f64::abs)).collect::<Vec<_>>());
    let (spd_mean, spd_se) = aggregate_stat(&records.iter().map(|r| r.spd).collect::<Vec<_>>());
    let (test_eod_abs_mean, _) =
        aggregate_stat(&records.iter().map(|r| r.test_eod.map(f64::abs)).collect::<Vec<_>>());
    CellSummary {
        method: first.method.clone(),
        alpha: first.alpha,
        beta: first.beta,
        eta: first.eta,
        lr: first.lr,
        n_seeds: records.len(),
        acc_mean: mean(&accs),
        acc_se: standard_error(&accs),
        eod_mean,
        eod_se,
        eod_abs_mean,
        eod_abs_se,
        spd_mean,
        spd_se,
        std_acc_mean: mean(&stds),
        std_acc_se: standard_error(&stds),
        test_acc_mean: mean(&records.iter().map(|r| r.test_acc).collect::<Vec<_>>()),
        test_eod_abs_mean,
    }
}

/// Accuracy slack when picking a learning rate by fairness: rates more than
/// this far below the cell's best accuracy are out of the running.
const LR_SELECTION_ACC_SLACK: f64 = 0.01;

/// Best rate for a cell: among rates whose accuracy is within the slack of
/// the cell's best, the one whose seed-mean metric sits closest to zero;
/// accuracy breaks ties. Keeps the selection from rewarding an untrained
/// model that is fair by vacancy.
fn select_lr(per_lr: Vec<CellSummary>) -> CellSummary {
    debug_assert!(!per_lr.is_empty());
    let best_acc = per_lr
        .iter()
        .map(|c| c.acc_mean)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<CellSummary> = None;
    for cand in per_lr {
        if cand.acc_mean < best_acc - LR_SELECTION_ACC_SLACK {
            continue;
        }
        let score = cand.eod_mean.map(f64::abs).unwrap_or(f64::INFINITY);
        let better = match &best {
            None => true,
            Some(b) => {
                let b_score = b.eod_mean.map(f64::abs).unwrap_or(f64::INFINITY);
                score < b_score || (score == b_score && cand.acc_mean > b.acc_mean)
            }
        };
        if better {
            best = Some(cand);
        }
    }
    best.expect("at least one rate within slack of the best accuracy")
}

/// A sweep's outcome: selected-rate summaries in grid order, plus any cells
/// that failed (the sweep keeps going past failures).
#[derive(Debug)]
pub struct SweepResult {
    pub cells: Vec<CellSummary>,
    pub failures: Vec<String>,
}

/// Runs the whole grid, in parallel across runs. With an output directory
/// the per-run artifacts are written and reruns reuse cached records.
pub fn sweep(spec: &SweepSpec, out: Option<&Path>, force: bool) -> Result<SweepResult, HarnessError> {
    spec.validate()?;
    let configs = spec.expand();
    let records: Vec<Result<RunRecord, HarnessError>> = configs
        .par_iter()
        .map(|cfg| match out {
            Some(dir) => run_cached(cfg, dir, force),
            None => run_once(cfg).map(|o| o.record),
        })
        .collect();

    let mut failures = Vec::new();
    let mut by_run = Vec::with_capacity(configs.len());
    for (cfg, rec) in configs.iter().zip(records) {
        match rec {
            Ok(r) => by_run.push(Some(r)),
            Err(e) => {
                failures.push(format!("{} [{}]: {e}", cfg.method, cfg.config_hash()));
                by_run.push(None);
            }
        }
    }

    // Grid order: method, alpha, beta, eta, lr, seed (seeds innermost).
    let n_seeds = spec.seeds.len();
    let n_lr = spec.learning_rates.len();
    let mut cells = Vec::new();
    let mut idx = 0;
    for _ in &spec.methods {
        for _ in spec.alpha_axis() {
            for _ in &spec.betas {
                for _ in &spec.etas {
                    let mut per_lr = Vec::with_capacity(n_lr);
                    let mut complete = true;
                    for _ in 0..n_lr {
                        let seed_records: Vec<&RunRecord> = by_run[idx..idx + n_seeds]
                            .iter()
                            .filter_map(|r| r.as_ref())
                            .collect();
                        if seed_records.len() == n_seeds {
                            per_lr.push(aggregate_cell(&seed_records));
                        } else {
                            complete = false;
                        }
                        idx += n_seeds;
                    }
                    if complete && !per_lr.is_empty() {
                        cells.push(select_lr(per_lr));
                    }
                }
            }
        }
    }
    Ok(SweepResult { cells, failures })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => String::new(),
    }
}

/// Long-format summary CSV, one row per cell.
pub fn summary_csv(cells: &[CellSummary]) -> String {
    let mut out = String::from(
        "method,alpha,beta,eta,lr,n_seeds,acc_mean,acc_se,eod_mean,eod_se,eod_abs_mean,eod_abs_se,spd_mean,spd_se,std_acc_mean,std_acc_se,test_acc_mean,test_eod_abs_mean\n",
    );
    for c in cells {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{},{},{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            c.method,
            fmt_opt(c.alpha),
            c.beta,
            c.eta,
            c.lr,
            c.n_seeds,
            c.acc_mean,
            c.acc_se,
            fmt_opt(c.eod_mean),
            fmt_opt(c.eod_se),
            fmt_opt(c.eod_abs_mean),
            fmt_opt(c.eod_abs_se),
            fmt_opt(c.spd_mean),
            fmt_opt(c.spd_se),
            c.std_acc_mean,
            c.std_acc_se,
            c.test_acc_mean,
            fmt_opt(c.test_eod_abs_mean),
        ));
    }
    out
}

fn sorted_alphas(cells: &[CellSummary]) -> Vec<f64> {
    let mut alphas: Vec<f64> = Vec::new();
    for c in cells {
        if let Some(a) = c.alpha {
            if !alphas.iter().any(|x| x.to_bits() == a.to_bits()) {
                alphas.push(a);
            }
        }
    }
    alphas.sort_by(f64::total_cmp);
    alphas
}

fn methods_in_order(cells: &[CellSummary]) -> Vec<String> {
    let mut methods = Vec::new();
    for c in cells {
        if !methods.contains(&c.method) {
            methods.push(c.method.clone());
        }
    }
    methods
}

/// Methods x heterogeneity pivot with one block per metric (accuracy, EOD,
/// SPD), mirroring a results-table layout.
pub fn pivot_csv(cells: &[CellSummary]) -> String {
    let alphas = sorted_alphas(cells);
    let methods = methods_in_order(cells);
    let mut out = String::from("block,method");
    for a in &alphas {
        out.push_str(&format!(",alpha={a}"));
    }
    out.push('\n');
    let lookup = |m: &str, a: f64| {
        cells
            .iter()
            .find(|c| c.method == m && c.alpha.map(f64::to_bits) == Some(a.to_bits()))
    };
    for (block, pick) in [
        ("acc", &(|c: &CellSummary| Some(c.acc_mean)) as &dyn Fn(&CellSummary) -> Option<f64>),
        ("eod", &|c: &CellSummary| c.eod_mean),
        ("spd", &|c: &CellSummary| c.spd_mean),
    ] {
        for m in &methods {
            out.push_str(&format!("{block},{m}"));
            for &a in &alphas {
                out.push(',');
                if let Some(cell) = lookup(m, a) {
                    out.push_str(&fmt_opt(pick(cell)));
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Budget on the x-axis, accuracy and fairness series per method.
pub fn beta_sweep_csv(cells: &[CellSummary]) -> String {
    let mut out =
        String::from("method,beta,acc_mean,acc_se,eod_mean,eod_abs_mean,eod_abs_se\n");
    let mut sorted: Vec<&CellSummary> = cells.iter().collect();
    sorted.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.beta.total_cmp(&b.beta))
    });
    for c in sorted {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{},{}\n",
            c.method,
            c.beta,
            c.acc_mean,
            c.acc_se,
            fmt_opt(c.eod_mean),
            fmt_opt(c.eod_abs_mean),
            fmt_opt(c.eod_abs_se),
        ));
    }
    out
}

/// Uniformity-mix table: accuracy spread against fairness per eta.
pub fn eta_sweep_csv(cells: &[CellSummary]) -> String {
    let mut out = String::from(
        "method,eta,acc_mean,std_acc_mean,std_acc_se,eod_abs_mean,eod_abs_se\n",
    );
    let mut sorted: Vec<&CellSummary> = cells.iter().collect();
    sorted.sort_by(|a, b| a.method.cmp(&b.method).then(a.eta.total_cmp(&b.eta)));
    for c in sorted {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            c.method,
            c.eta,
            c.acc_mean,
            c.std_acc_mean,
            c.std_acc_se,
            fmt_opt(c.eod_abs_mean),
            fmt_opt(c.eod_abs_se),
        ));
    }
    out
}

/// Adoption-fraction series for mixed methods: fraction on the x-axis.
pub fn adoption_csv(cells: &[CellSummary]) -> String {
    let mut rows: Vec<(f64, &CellSummary)> = cells
        .iter()
        .filter_map(|c| match Method::parse(&c.method, 1) {
            Ok(Method::Mixed { fraction, .. }) => Some((fraction, c)),
            _ => None,
        })
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.method.cmp(&b.1.method)));
    let mut out = String::from(
        "fraction,method,acc_mean,acc_se,eod_abs_mean,eod_abs_se\n",
    );
    for (fraction, c) in rows {
        out.push_str(&format!(
            "{:.6},{},{:.6},{:.6},{},{}\n",
            fraction,
            c.method,
            c.acc_mean,
            c.acc_se,
            fmt_opt(c.eod_abs_mean),
            fmt_opt(c.eod_abs_se),
        ));
    }
    out
}

/// Writes the sweep's CSV artifacts; shaped files appear only when the grid
/// actually spans their axis.
pub fn write_sweep_outputs(
    spec: &SweepSpec,
    result: &SweepResult,
    out: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, content: String| -> Result<(), HarnessError> {
        let path = out.join(name);
        fs::write(&path, content)?;
        written.push(path);
        Ok(())
    };
    emit("summary.csv", summary_csv(&result.cells))?;
    if spec.alphas.len() > 1 {
        emit("pivot.csv", pivot_csv(&result.cells))?;
    }
    if spec.betas.len() > 1 {
        emit("beta_sweep.csv", beta_sweep_csv(&result.cells))?;
    }
    if spec.etas.len() > 1 {
        emit("eta_sweep.csv", eta_sweep_csv(&result.cells))?;
    }
    if result
        .cells
        .iter()
        .any(|c| matches!(Method::parse(&c.method, 1), Ok(Method::Mixed { .. })))
    {
        emit("adoption.csv", adoption_csv(&result.cells))?;
    }
    Ok(written)
}

/// Rebuilds cell summaries from the per-run records under a directory
/// (every immediate subdirectory with a record.json). Grouping is by
/// (method, alpha, beta, eta, lr); no learning-rate selection is applied,
/// since the directory may hold any mix of grids.
pub fn collect_records(dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut records = Vec::new();
    if dir.is_dir() {
        let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            let record = sub.join("record.json");
            if record.exists() {
                records.push(read_json::<RunRecord>(&record)?);
            }
        }
    }
    if records.is_empty() {
        return Err(HarnessError::NoRuns(dir.to_path_buf()));
    }
    Ok(records)
}

fn group_cells(records: &[RunRecord]) -> Vec<CellSummary> {
    let mut keys: Vec<(String, Option<u64>, u64, u64, u64)> = Vec::new();
    for r in records {
        let key = (
            r.method.clone(),
            r.alpha.map(f64::to_bits),
            r.beta.to_bits(),
            r.eta.to_bits(),
            r.lr.to_bits(),
        );
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.iter()
        .map(|key| {
            let members: Vec<&RunRecord> = records
                .iter()
                .filter(|r| {
                    r.method == key.0
                        && r.alpha.map(f64::to_bits) == key.1
                        && r.beta.to_bits() == key.2
                        && r.eta.to_bits() == key.3
                        && r.lr.to_bits() == key.4
                })
                .collect();
            aggregate_cell(&members)
        })
        .collect()
}

fn md_opt(v: Option<f64>, se: Option<f64>) -> String {
    match (v, se) {
        (Some(x), Some(s)) => format!("{x:.3} +/- {s:.3}"),
        (Some(x), None) => format!("{x:.3}"),
        _ => "-".to_string(),
    }
}

/// Renders a markdown report over everything recorded under `dir` and
/// writes report.md plus regenerated CSVs. Returns the markdown.
pub fn cmd_report(dir: &Path) -> Result<String, HarnessError> {
    let records = collect_records(dir)?;
    let cells = group_cells(&records);
    let mut md = String::from("# Sweep report\n\n");
    md.push_str(&format!(
        "{} runs, {} cells (method x alpha x beta x eta x lr).\n\n",
        records.len(),
        cells.len()
    ));
    md.push_str("| method | alpha | beta | eta | lr | seeds | acc | eod | spd | std-acc |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for c in &cells {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            c.method,
            c.alpha.map(|a| a.to_string()).unwrap_or_else(|| "-".into()),
            c.beta,
            c.eta,
            c.lr,
            c.n_seeds,
            md_opt(Some(c.acc_mean), Some(c.acc_se)),
            md_opt(c.eod_mean, c.eod_se),
            md_opt(c.spd_mean, c.spd_se),
            md_opt(Some(c.std_acc_mean), Some(c.std_acc_se)),
        ));
    }
    let seen: BTreeSet<&str> = cells.iter().map(|c| c.method.as_str()).collect();
    md.push_str(&format!("\nMethods: {}\n", seen.into_iter().collect::<Vec<_>>().join(", ")));
    fs::write(dir.join("report.md"), &md)?;
    fs::write(dir.join("summary.csv"), summary_csv(&cells))?;
    if sorted_alphas(&cells).len() > 1 {
        fs::write(dir.join("pivot.csv"), pivot_csv(&cells))?;
    }
    Ok(md)
}

/// Prepares a dataset to a cache directory and returns census lines for
/// printing: row counts, group balance, and per-group base rates.
pub fn cmd_prepare(
    dataset: &str,
    schema_path: Option<&Path>,
    rows: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<String>, HarnessError> {
    let split = SplitSpec {
        test_fraction: 0.3,
        seed: derive_seed(seed, "split", &[]),
    };
    let prepared = if ingest::synth::is_builtin(dataset) {
        let (csv, schema) =
            ingest::synth::generate(dataset, rows, derive_seed(seed, "dataset-synth", &[]))?;
        let loaded = ingest::load_csv_text(&csv, &schema)?;
        ingest::prepare_table(&loaded, &schema, &split, dataset)?
    } else {
        let schema_path =
            schema_path.ok_or_else(|| HarnessError::InvalidConfig("missing schema".into()))?;
        let schema: Schema = read_json(schema_path)?;
        ingest::prepare_csv(Path::new(dataset), &schema, &split)?
    };
    ingest::write_cache(out, &prepared)?;
    let census = crate::metrics::AyCensus::from_dataset(&prepared.train);
    let n = census.total() as f64;
    let base_rate = |a: u8| {
        let g = census.group_total(a);
        if g == 0 {
            0.0
        } else {
            census.count(a, 1) as f64 / g as f64
        }
    };
    let mut lines = vec![
        format!(
            "prepared {} -> {} (train {} rows, test {} rows, {} features)",
            dataset,
            out.display(),
            prepared.train.n_rows(),
            prepared.test.n_rows(),
            prepared.train.n_features()
        ),
        format!("dropped rows: {}", prepared.meta.dropped_rows),
        format!(
            "sensitive balance: A=0 {:.3}, A=1 {:.3}",
            census.group_total(0) as f64 / n,
            census.group_total(1) as f64 / n
        ),
        format!(
            "base rates P(Y=1|A): A=0 {:.3}, A=1 {:.3}",
            base_rate(0),
            base_rate(1)
        ),
    ];
    if !prepared.meta.dropped_features.is_empty() {
        lines.push(format!(
            "dropped zero-variance features: {}",
            prepared.meta.dropped_features.join(", ")
        ));
    }
    Ok(lines)
}

/// Pretty one-line rendering of a run record for terminal output.
pub fn record_line(r: &RunRecord) -> String {
    let mut line = format!(
        "{} seed {} acc {:.4} std-acc {:.4}",
        r.method, r.seed, r.acc, r.std_acc
    );
    if let Some(e) = r.eod {
        line.push_str(&format!(" eod {e:+.4}"));
    }
    if let Some(s) = r.spd {
        line.push_str(&format!(" spd {s:+.4}"));
    }
    line.push_str(&format!(
        " test-acc {:.4} (hash {})",
        r.test_acc, r.config_hash
    ));
    if r.fallback_rounds > 0 {
        line.push_str(&format!(" fallbacks {}", r.fallback_rounds));
    }
    if r.undefined_fk_events > 0 {
        line.push_str(&format!(" undefined-fk {}", r.undefined_fk_events));
    }
    line
}

/// Writes a sweep spec's artifacts after running it; convenience wrapper
/// used by the CLI.
pub fn cmd_sweep(
    spec: &SweepSpec,
    out: &Path,
    force: bool,
) -> Result<(SweepResult, Vec<PathBuf>), HarnessError> {
    fs::create_dir_all(out)?;
    write_json(&out.join("sweep.json"), spec)?;
    let result = sweep(spec, Some(out), force)?;
    let written = write_sweep_outputs(spec, &result, out)?;
    for failure in &result.failures {
        log::warn!("sweep cell failed: {failure}");
    }
    Ok((result, written))
}
