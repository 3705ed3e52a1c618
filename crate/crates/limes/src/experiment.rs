//! Experiment orchestration: config files, the generate/run/report commands,
//! checkpointing, and deterministic parallel execution.
//!
//! A run evaluates each (method, realization) pair over the stream: at every
//! step `t` from 1 to `T-1`, the batch is split 80/20, the predictor built
//! from steps `1..t-1` is scored on the eval split, and only then does the
//! method observe the train split. Step 1 is scored with the untrained zero
//! model so all methods share the same series length. Workers run pairs in
//! parallel; outputs are merged in a fixed order, so identical configs
//! produce byte-identical artifacts.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    self, read_series_csv, step_accuracy, summarize_realizations, write_pairwise_csv,
    write_series_csv, write_summary_csv, AccuracySeries, MetricsError, MetricsReport, PairingMode,
};
use crate::model::LinearModel;
use crate::seeds;
use crate::strategies::{LearnerState, MethodKind, StrategyConfig, StrategyError};
use crate::stream::{default_phases, ring_means, save_dataset};
use crate::stream::{
    load_dataset, split_train_eval, subsample_realization, GeneratorConfig, SplitSpec,
    StreamDataset, StreamError,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Data(#[from] StreamError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("missing or incomplete series for: {}", format_pairs(.0))]
    MissingSeries(Vec<(MethodKind, usize)>),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}

fn format_pairs(pairs: &[(MethodKind, usize)]) -> String {
    pairs
        .iter()
        .map(|(m, r)| format!("({m}, realization {r})"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl ExperimentError {
    /// Process exit code: 2 config, 3 I/O, 4 data validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Io { .. } => 3,
            ExperimentError::Data(StreamError::Io { .. }) => 3,
            ExperimentError::Data(_) => 4,
            ExperimentError::Metrics(MetricsError::Io { .. }) => 3,
            ExperimentError::Metrics(_) => 4,
            ExperimentError::Strategy(
                StrategyError::UnknownMethod(_)
                | StrategyError::InvalidConfig(_)
                | StrategyError::RetentionDisabled,
            ) => 2,
            ExperimentError::Strategy(_) => 4,
            ExperimentError::MissingSeries(_) => 4,
            ExperimentError::CheckpointMismatch(_) => 4,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub generator: Option<GeneratorConfig>,
    pub methods: Vec<MethodKind>,
    pub train_fraction: f64,
    pub stride: usize,
    pub realizations: usize,
    pub seed: u64,
    pub strategy: StrategyConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: u32,
    #[serde(default)]
    generator: Option<RawGenerator>,
    #[serde(default)]
    run: RawRun,
    #[serde(default)]
    optimizer: crate::optim::TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawGenerator {
    num_classes: usize,
    feature_dim: usize,
    period: usize,
    num_steps: usize,
    examples_per_step: usize,
    class_stddev: f64,
    class_means: Option<Vec<Vec<f64>>>,
    prior_amplitudes: Option<Vec<f64>>,
    prior_phases: Option<Vec<f64>>,
    seed: u64,
}

impl Default for RawGenerator {
    fn default() -> Self {
        let d = GeneratorConfig::default();
        Self {
            num_classes: d.num_classes,
            feature_dim: d.feature_dim,
            period: d.period,
            num_steps: d.num_steps,
            examples_per_step: d.examples_per_step,
            class_stddev: d.class_stddev,
            class_means: None,
            prior_amplitudes: None,
            prior_phases: None,
            seed: d.seed,
        }
    }
}

impl RawGenerator {
    fn resolve(self) -> GeneratorConfig {
        GeneratorConfig {
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            period: self.period,
            num_steps: self.num_steps,
            examples_per_step: self.examples_per_step,
            class_means: self.class_means.unwrap_or_else(|| {
                ring_means(self.num_classes, self.feature_dim, 1.3 * self.class_stddev)
            }),
            class_stddev: self.class_stddev,
            prior_amplitudes: self
                .prior_amplitudes
                .unwrap_or_else(|| vec![1.3; self.num_classes]),
            prior_phases: self
                .prior_phases
                .unwrap_or_else(|| default_phases(self.num_classes)),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawRun {
    methods: Vec<String>,
    train_fraction: f64,
    stride: usize,
    realizations: usize,
    seed: u64,
    ensemble_size: usize,
    prob_floor: f64,
    pseudo_count: f64,
    retain_batches: bool,
}

impl Default for RawRun {
    fn default() -> Self {
        let strategy = StrategyConfig::default();
        Self {
            methods: vec![
                "limes".into(),
                "incremental".into(),
                "random".into(),
                "ensemble".into(),
                "restart".into(),
            ],
            train_fraction: 0.8,
            stride: 10,
            realizations: 10,
            seed: 1,
            ensemble_size: strategy.ensemble_size,
            prob_floor: strategy.prob_floor,
            pseudo_count: strategy.pseudo_count,
            retain_batches: strategy.retain_batches,
        }
    }
}

/// Parse and validate a TOML config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text)
}

/// Parse and validate config text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
    if raw.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(ExperimentError::Config(format!(
            "unsupported schema_version {}, expected {CONFIG_SCHEMA_VERSION}",
            raw.schema_version
        )));
    }
    let generator = match raw.generator {
        Some(g) => {
            let resolved = g.resolve();
            resolved
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            Some(resolved)
        }
        None => None,
    };
    let methods = parse_methods(&raw.run.methods)?;
    let config = ExperimentConfig {
        generator,
        methods,
        train_fraction: raw.run.train_fraction,
        stride: raw.run.stride,
        realizations: raw.run.realizations,
        seed: raw.run.seed,
        strategy: StrategyConfig {
            train: raw.optimizer,
            ensemble_size: raw.run.ensemble_size,
            prob_floor: raw.run.prob_floor,
            pseudo_count: raw.run.pseudo_count,
            retain_batches: raw.run.retain_batches,
        },
    };
    config.validate()?;
    Ok(config)
}

/// Parse method names, rejecting unknown names and duplicates.
pub fn parse_methods(names: &[String]) -> Result<Vec<MethodKind>, ExperimentError> {
    let mut methods = Vec::with_capacity(names.len());
    for name in names {
        let kind: MethodKind = name
            .parse()
            .map_err(|e: StrategyError| ExperimentError::Config(e.to_string()))?;
        if methods.contains(&kind) {
            return Err(ExperimentError::Config(format!(
                "duplicate method `{kind}`"
            )));
        }
        methods.push(kind);
    }
    Ok(methods)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.methods.is_empty() {
            return Err(ExperimentError::Config(
                "run.methods: need at least one method".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(ExperimentError::Config(format!(
                "run.train_fraction: must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.stride == 0 {
            return Err(ExperimentError::Config(
                "run.stride: must be at least 1".into(),
            ));
        }
        if self.realizations == 0 || self.realizations > self.stride {
            return Err(ExperimentError::Config(format!(
                "run.realizations: must lie in 1..=stride ({}), got {}",
                self.stride, self.realizations
            )));
        }
        self.strategy
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.methods.contains(&MethodKind::ErmFull) && !self.strategy.retain_batches {
            return Err(ExperimentError::Config(
                "run.retain_batches: erm_full requires batch retention".into(),
            ));
        }
        Ok(())
    }
}

/// What `generate` produced.
#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_steps: usize,
    pub examples_per_step: usize,
    pub period: usize,
    pub data_path: PathBuf,
}

/// Generate the configured synthetic stream and write it to `out`.
pub fn generate(config: &ExperimentConfig, out: &Path) -> Result<GenerateSummary, ExperimentError> {
    let generator = config
        .generator
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("config has no [generator] section".into()))?;
    let dataset = generator.generate()?;
    save_dataset(&dataset, out)?;
    Ok(GenerateSummary {
        num_classes: dataset.num_classes,
        feature_dim: dataset.feature_dim,
        num_steps: dataset.num_steps(),
        examples_per_step: generator.examples_per_step,
        period: generator.period,
        data_path: out.to_path_buf(),
    })
}

/// Command-line overrides applied on top of the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub methods: Option<Vec<MethodKind>>,
    pub seed: Option<u64>,
    pub resume: bool,
}

/// What `run` produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub methods: Vec<MethodKind>,
    pub realizations: usize,
    pub steps_evaluated: usize,
    pub period: usize,
    pub series_path: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    method: MethodKind,
    realization: usize,
    num_classes: usize,
    feature_dim: usize,
    seed: u64,
    state: LearnerState,
    accuracies: Vec<(usize, f64)>,
}

fn checkpoint_path(out_dir: &Path, method: MethodKind, realization: usize) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("{method}_r{realization}.json"))
}

/// Worker count: `STREAM_WORKERS` if set, otherwise the rayon default
/// (available cores).
fn worker_count() -> Result<usize, ExperimentError> {
    match std::env::var("STREAM_WORKERS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                ExperimentError::Config(format!(
                    "STREAM_WORKERS must be a positive integer, got `{v}`"
                ))
            }),
        Err(_) => Ok(0), // rayon interprets 0 as "choose automatically"
    }
}

/// Run every (method, realization) pair over the dataset and write the run
/// artifacts: `series.csv`, `run.manifest`, per-pair checkpoints, and
/// history CSVs for the methods that keep one.
pub fn run(
    config: &ExperimentConfig,
    data_path: &Path,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<RunSummary, ExperimentError> {
    let methods = options
        .methods
        .clone()
        .unwrap_or_else(|| config.methods.clone());
    if methods.is_empty() {
        return Err(ExperimentError::Config("no methods selected".into()));
    }
    if methods.contains(&MethodKind::ErmFull) && !config.strategy.retain_batches {
        return Err(ExperimentError::Config(
            "run.retain_batches: erm_full requires batch retention".into(),
        ));
    }
    let seed = options.seed.unwrap_or(config.seed);

    let dataset = load_dataset(data_path)?;
    if dataset.num_steps() < 2 {
        return Err(ExperimentError::Config(format!(
            "dataset has {} time steps; need at least 2 to evaluate",
            dataset.num_steps()
        )));
    }
    if let Some(generator) = &config.generator {
        if generator.num_classes != dataset.num_classes
            || generator.feature_dim != dataset.feature_dim
            || generator.period != dataset.meta.period
        {
            return Err(ExperimentError::Config(format!(
                "dataset/manifest mismatch: config generator is (L={}, d={}, period={}) but dataset is (L={}, d={}, period={})",
                generator.num_classes,
                generator.feature_dim,
                generator.period,
                dataset.num_classes,
                dataset.feature_dim,
                dataset.meta.period
            )));
        }
    }
    let period = dataset.meta.period;

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let hist_dir = out_dir.join("history");
    fs::create_dir_all(&hist_dir).map_err(io_err(&hist_dir))?;

    let mut realizations = Vec::with_capacity(config.realizations);
    for r in 0..config.realizations {
        realizations.push(subsample_realization(&dataset, config.stride, r)?);
    }

    let jobs: Vec<(MethodKind, usize)> = methods
        .iter()
        .flat_map(|&m| (0..config.realizations).map(move |r| (m, r)))
        .collect();

    let workers = worker_count()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Config(format!("worker pool: {e}")))?;

    let results: Vec<Result<AccuracySeries, ExperimentError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(method, realization)| {
                simulate(
                    method,
                    realization,
                    &realizations[realization],
                    config,
                    seed,
                    period,
                    out_dir,
                    options.resume,
                )
            })
            .collect()
    });
    let mut all_series = Vec::with_capacity(results.len());
    for result in results {
        all_series.push(result?);
    }

    let series_path = out_dir.join("series.csv");
    write_series_csv(&all_series, &series_path)?;

    let steps_evaluated = dataset.num_steps() - 1;
    let manifest_path = out_dir.join("run.manifest");
    let mut m = BufWriter::new(File::create(&manifest_path).map_err(io_err(&manifest_path))?);
    let write_manifest = |m: &mut BufWriter<File>| -> io::Result<()> {
        writeln!(m, "schema_version={CONFIG_SCHEMA_VERSION}")?;
        writeln!(m, "period={period}")?;
        writeln!(
            m,
            "methods={}",
            methods
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join(",")
        )?;
        writeln!(m, "stride={}", config.stride)?;
        writeln!(m, "realizations={}", config.realizations)?;
        writeln!(m, "seed={seed}")?;
        writeln!(m, "steps_evaluated={steps_evaluated}")?;
        writeln!(m, "data_source={}", dataset.meta.source)?;
        m.flush()
    };
    write_manifest(&mut m).map_err(io_err(&manifest_path))?;

    Ok(RunSummary {
        methods,
        realizations: config.realizations,
        steps_evaluated,
        period,
        series_path,
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    method: MethodKind,
    realization: usize,
    data: &StreamDataset,
    config: &ExperimentConfig,
    seed: u64,
    period: usize,
    out_dir: &Path,
    resume: bool,
) -> Result<AccuracySeries, ExperimentError> {
    let num_classes = data.num_classes;
    let feature_dim = data.feature_dim;
    let ckpt_path = checkpoint_path(out_dir, method, realization);
    let state_seed = seeds::derive(seed, seeds::STREAM_STATE, realization as u64);

    let (mut state, mut accuracies) = if resume && ckpt_path.exists() {
        let text = fs::read_to_string(&ckpt_path).map_err(io_err(&ckpt_path))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::CheckpointMismatch(format!("unreadable: {e}")))?;
        if ck.method != method
            || ck.realization != realization
            || ck.num_classes != num_classes
            || ck.feature_dim != feature_dim
            || ck.seed != seed
        {
            return Err(ExperimentError::CheckpointMismatch(format!(
                "{} does not match run parameters (method {method}, realization {realization}, L={num_classes}, d={feature_dim}, seed {seed})",
                ckpt_path.display()
            )));
        }
        (ck.state, ck.accuracies)
    } else {
        (
            LearnerState::new(
                method,
                num_classes,
                feature_dim,
                config.strategy.clone(),
                state_seed,
            )?,
            Vec::new(),
        )
    };

    let t_end = data.num_steps() - 1;
    for t in state.step() + 1..=t_end {
        let batch = &data.batches[t - 1];
        let split_seed = seeds::derive(seed, seeds::STREAM_SPLIT, seeds::pack(realization, t));
        let (train, eval) = split_train_eval(
            batch,
            &SplitSpec {
                train_fraction: config.train_fraction,
                seed: split_seed,
            },
        )?;
        let predictor = if state.step() == 0 {
            LinearModel::zeros(feature_dim, num_classes)
        } else {
            state.predictor_for_next()?
        };
        accuracies.push((t, step_accuracy(&predictor, &eval)?));
        state.observe(&train)?;
        if t % period == 0 || t == t_end {
            let ck = Checkpoint {
                schema_version: CONFIG_SCHEMA_VERSION,
                method,
                realization,
                num_classes,
                feature_dim,
                seed,
                state: state.clone(),
                accuracies: accuracies.clone(),
            };
            let text = serde_json::to_string(&ck)
                .map_err(|e| ExperimentError::CheckpointMismatch(format!("serialize: {e}")))?;
            fs::write(&ckpt_path, text).map_err(io_err(&ckpt_path))?;
        }
    }

    if let Some(history) = state.history() {
        let hist_path = out_dir
            .join("history")
            .join(format!("{method}_r{realization}.csv"));
        let file = File::create(&hist_path).map_err(io_err(&hist_path))?;
        history
            .write_csv(BufWriter::new(file))
            .map_err(io_err(&hist_path))?;
    }

    Ok(AccuracySeries {
        method,
        realization,
        per_step: accuracies,
    })
}

/// Facts reported about a run directory by `report`.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub period: usize,
    pub methods: Vec<MethodKind>,
    pub realizations: usize,
    pub steps_evaluated: usize,
}

fn read_run_manifest(run_dir: &Path) -> Result<RunManifest, ExperimentError> {
    let path = run_dir.join("run.manifest");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut period = None;
    let mut methods = None;
    let mut realizations = None;
    let mut steps_evaluated = None;
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        match key.trim() {
            "period" => period = value.trim().parse::<usize>().ok(),
            "realizations" => realizations = value.trim().parse::<usize>().ok(),
            "steps_evaluated" => steps_evaluated = value.trim().parse::<usize>().ok(),
            "methods" => {
                let names: Vec<String> = value.trim().split(',').map(|s| s.to_string()).collect();
                methods = Some(parse_methods(&names)?);
            }
            _ => {}
        }
    }
    let missing =
        |key: &str| ExperimentError::Config(format!("{}: missing key `{key}`", path.display()));
    Ok(RunManifest {
        period: period.ok_or_else(|| missing("period"))?,
        methods: methods.ok_or_else(|| missing("methods"))?,
        realizations: realizations.ok_or_else(|| missing("realizations"))?,
        steps_evaluated: steps_evaluated.ok_or_else(|| missing("steps_evaluated"))?,
    })
}

/// Summarize a run directory: reads `series.csv`, verifies completeness,
/// writes `summary.csv` and `pairwise.csv`, and returns the report.
pub fn report(run_dir: &Path, pairing: PairingMode) -> Result<MetricsReport, ExperimentError> {
    let manifest = read_run_manifest(run_dir)?;
    let all_series = read_series_csv(&run_dir.join("series.csv"))?;

    let mut missing = Vec::new();
    for &method in &manifest.methods {
        for r in 0..manifest.realizations {
            let complete = all_series.iter().any(|s| {
                s.method == method
                    && s.realization == r
                    && s.per_step.len() == manifest.steps_evaluated
            });
            if !complete {
                missing.push((method, r));
            }
        }
    }
    if !missing.is_empty() {
        return Err(ExperimentError::MissingSeries(missing));
    }

    let report = summarize_realizations(&all_series, manifest.period, pairing)?;
    write_summary_csv(&report, &run_dir.join("summary.csv"))?;
    write_pairwise_csv(&report, &run_dir.join("pairwise.csv"))?;
    Ok(report)
}

/// Text table of per-method aggregates plus pairwise test lines.
pub fn render_report_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    let fmt_stat = |s: &metrics::SummaryStat| match s.std {
        Some(std) => format!("{:.4} ± {:.4}", s.mean, std),
        None => format!("{:.4}", s.mean),
    };
    out.push_str(&format!(
        "{:<14}{:<22}{:<22}\n",
        "method", "avg-of-avg", "avg-of-min"
    ));
    for s in &report.summaries {
        out.push_str(&format!(
            "{:<14}{:<22}{:<22}\n",
            s.method.name(),
            fmt_stat(&s.avg_of_avg),
            fmt_stat(&s.avg_of_min)
        ));
    }
    if !report.pairwise.is_empty() {
        out.push_str("\npairwise Wilcoxon signed-rank (two-sided):\n");
        for t in &report.pairwise {
            out.push_str(&format!(
                "{:<14}vs {:<14}{:<12}W={:<8}p={}\n",
                t.method_a.name(),
                t.method_b.name(),
                t.metric.name(),
                t.statistic,
                t.p_value
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::split_indices;

    fn tiny_config_text() -> String {
        r#"
schema_version = 1

[generator]
num_classes = 3
feature_dim = 2
period = 4
num_steps = 13
examples_per_step = 30
class_stddev = 1.0
seed = 5

[run]
methods = ["limes", "incremental"]
train_fraction = 0.8
stride = 2
realizations = 2
seed = 11

[optimizer]
minibatch_size = 8
"#
        .to_string()
    }

    #[test]
    fn parse_config_applies_defaults_and_overrides() {
        let cfg = parse_config(&tiny_config_text()).unwrap();
        assert_eq!(
            cfg.methods,
            vec![MethodKind::Limes, MethodKind::Incremental]
        );
        assert_eq!(cfg.strategy.train.minibatch_size, 8);
        assert_eq!(cfg.strategy.train.learning_rate, 0.001);
        assert_eq!(cfg.strategy.ensemble_size, 24);
        let g = cfg.generator.unwrap();
        assert_eq!(g.num_steps, 13);
        assert_eq!(g.class_means.len(), 3);
    }

    #[test]
    fn parse_config_rejects_bad_input() {
        assert!(matches!(
            parse_config("schema_version = 2"),
            Err(ExperimentError::Config(_))
        ));
        assert!(matches!(
            parse_config("schema_version = 1\n[run]\nmethods = [\"bogus\"]"),
            Err(ExperimentError::Config(_))
        ));
        assert!(matches!(
            parse_config("schema_version = 1\n[run]\nmethods = []"),
            Err(ExperimentError::Config(_))
        ));
        assert!(matches!(
            parse_config("schema_version = 1\n[run]\nrealizations = 20\nstride = 10"),
            Err(ExperimentError::Config(_))
        ));
        assert!(matches!(
            parse_config("schema_version = 1\n[run]\nmethods = [\"erm_full\"]"),
            Err(ExperimentError::Config(_))
        ));
        // Field name must appear in generator validation failures.
        let err = parse_config("schema_version = 1\n[generator]\nclass_stddev = -1.0").unwrap_err();
        assert!(err.to_string().contains("class_stddev"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn generate_run_report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&tiny_config_text()).unwrap();
        let data = dir.path().join("data.csv");
        let summary = generate(&cfg, &data).unwrap();
        assert_eq!(summary.num_steps, 13);

        let out = dir.path().join("run1");
        let run_summary = run(&cfg, &data, &out, &RunOptions::default()).unwrap();
        assert_eq!(run_summary.steps_evaluated, 12);

        let series = read_series_csv(&out.join("series.csv")).unwrap();
        assert_eq!(series.len(), 4); // 2 methods x 2 realizations
        for s in &series {
            assert_eq!(s.per_step.len(), 12);
        }

        let report = report(&out, PairingMode::PerRealization).unwrap();
        assert_eq!(report.summaries.len(), 2);
        assert!(out.join("summary.csv").exists());
        assert!(out.join("pairwise.csv").exists());
        assert!(out.join("history").join("limes_r0.csv").exists());
        let table = render_report_table(&report);
        assert!(table.contains("limes"));
        assert!(table.contains("avg-of-min"));
    }

    #[test]
    fn runs_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&tiny_config_text()).unwrap();
        let data = dir.path().join("data.csv");
        generate(&cfg, &data).unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        run(&cfg, &data, &out_a, &RunOptions::default()).unwrap();
        run(&cfg, &data, &out_b, &RunOptions::default()).unwrap();
        for file in ["series.csv", "run.manifest"] {
            let a = fs::read(out_a.join(file)).unwrap();
            let b = fs::read(out_b.join(file)).unwrap();
            assert_eq!(a, b, "{file} differs");
        }
        let a = fs::read(checkpoint_path(&out_a, MethodKind::Limes, 1)).unwrap();
        let b = fs::read(checkpoint_path(&out_b, MethodKind::Limes, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&tiny_config_text()).unwrap();
        let data = dir.path().join("data.csv");
        generate(&cfg, &data).unwrap();

        // Full run.
        let full = dir.path().join("full");
        run(&cfg, &data, &full, &RunOptions::default()).unwrap();

        // Interrupted run: truncate the dataset to 9 steps, run, then resume
        // on the full dataset.
        let short_cfg = {
            let mut c = cfg.clone();
            if let Some(g) = &mut c.generator {
                g.num_steps = 9;
            }
            c
        };
        let short_data = dir.path().join("short.csv");
        generate(&short_cfg, &short_data).unwrap();
        let resumed = dir.path().join("resumed");
        run(&short_cfg, &short_data, &resumed, &RunOptions::default()).unwrap();
        run(
            &cfg,
            &data,
            &resumed,
            &RunOptions {
                resume: true,
                ..RunOptions::default()
            },
        )
        .unwrap();

        let a = fs::read(full.join("series.csv")).unwrap();
        let b = fs::read(resumed.join("series.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_json_round_trips_floats_exactly() {
        // Values like 109/120 sit where best-effort JSON float parsing is off
        // by one ulp; byte-exact resume needs the full round trip.
        let mut state =
            LearnerState::new(MethodKind::Limes, 3, 2, StrategyConfig::default(), 3).unwrap();
        state
            .observe(&crate::stream::TimeStepBatch {
                t: 1,
                examples: vec![
                    (vec![0.1, 0.2], 0),
                    (vec![-0.3, 0.9], 1),
                    (vec![0.7, -0.4], 2),
                ],
            })
            .unwrap();
        let ck = Checkpoint {
            schema_version: CONFIG_SCHEMA_VERSION,
            method: MethodKind::Limes,
            realization: 0,
            num_classes: 3,
            feature_dim: 2,
            seed: 3,
            state,
            accuracies: vec![(1, 109.0 / 120.0), (2, 1.0 / 3.0), (3, 0.1 + 0.2)],
        };
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back.accuracies, ck.accuracies);
        assert_eq!(back.state, ck.state);
    }

    #[test]
    fn resume_rejects_mismatched_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&tiny_config_text()).unwrap();
        let data = dir.path().join("data.csv");
        generate(&cfg, &data).unwrap();
        let out = dir.path().join("run");
        run(&cfg, &data, &out, &RunOptions::default()).unwrap();
        let err = run(
            &cfg,
            &data,
            &out,
            &RunOptions {
                seed: Some(999),
                resume: true,
                ..RunOptions::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, ExperimentError::CheckpointMismatch(_)));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn corrupting_eval_labels_changes_accuracies_but_not_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config(&tiny_config_text()).unwrap();
        cfg.methods = vec![MethodKind::Limes];
        cfg.realizations = 1;
        cfg.stride = 1;
        let data_path = dir.path().join("data.csv");
        generate(&cfg, &data_path).unwrap();

        // Corrupt the labels of exactly the examples the runner will put in
        // the eval split of each step (stride 1, realization 0).
        let mut corrupted = load_dataset(&data_path).unwrap();
        for batch in &mut corrupted.batches {
            let split_seed = seeds::derive(cfg.seed, seeds::STREAM_SPLIT, seeds::pack(0, batch.t));
            let (_, eval_idx) = split_indices(
                batch.n(),
                &SplitSpec {
                    train_fraction: cfg.train_fraction,
                    seed: split_seed,
                },
            )
            .unwrap();
            for i in eval_idx {
                let (_, y) = &mut batch.examples[i];
                *y = (*y + 1) % corrupted.num_classes;
            }
        }
        let corrupted_path = dir.path().join("corrupted.csv");
        save_dataset(&corrupted, &corrupted_path).unwrap();

        let out_clean = dir.path().join("clean");
        let out_corrupt = dir.path().join("corrupt");
        run(&cfg, &data_path, &out_clean, &RunOptions::default()).unwrap();
        run(&cfg, &corrupted_path, &out_corrupt, &RunOptions::default()).unwrap();

        let series_a = fs::read(out_clean.join("series.csv")).unwrap();
        let series_b = fs::read(out_corrupt.join("series.csv")).unwrap();
        assert_ne!(series_a, series_b, "eval corruption must change accuracies");

        let ck_a = fs::read(checkpoint_path(&out_clean, MethodKind::Limes, 0)).unwrap();
        let ck_b = fs::read(checkpoint_path(&out_corrupt, MethodKind::Limes, 0)).unwrap();
        // Checkpoints embed the accuracy series; compare the learner states.
        let a: Checkpoint = serde_json::from_slice(&ck_a).unwrap();
        let b: Checkpoint = serde_json::from_slice(&ck_b).unwrap();
        assert_eq!(a.state, b.state, "models must not see eval data");
        assert_ne!(a.accuracies, b.accuracies);
    }

    #[test]
    fn run_rejects_dataset_not_matching_generator_section() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&tiny_config_text()).unwrap();
        let data = dir.path().join("data.csv");
        generate(&cfg, &data).unwrap();
        let mut other = cfg.clone();
        if let Some(g) = &mut other.generator {
            g.period = 12;
        }
        let err = run(
            &other,
            &data,
            &dir.path().join("run"),
            &RunOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn erm_full_runs_when_retention_enabled() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config(&tiny_config_text()).unwrap();
        cfg.methods = vec![MethodKind::ErmFull];
        cfg.strategy.retain_batches = true;
        let data = dir.path().join("data.csv");
        generate(&cfg, &data).unwrap();
        let out = dir.path().join("run");
        let summary = run(&cfg, &data, &out, &RunOptions::default()).unwrap();
        assert_eq!(summary.methods, vec![MethodKind::ErmFull]);
        let series = read_series_csv(&out.join("series.csv")).unwrap();
        assert_eq!(series.len(), 2);
    }

    #[test]
    fn worker_cap_does_not_change_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&tiny_config_text()).unwrap();
        let data = dir.path().join("data.csv");
        generate(&cfg, &data).unwrap();
        let default_out = dir.path().join("default");
        run(&cfg, &data, &default_out, &RunOptions::default()).unwrap();

        let capped_out = dir.path().join("capped");
        std::env::set_var("STREAM_WORKERS", "1");
        let result = run(&cfg, &data, &capped_out, &RunOptions::default());
        std::env::remove_var("STREAM_WORKERS");
        result.unwrap();
        assert_eq!(
            fs::read(default_out.join("series.csv")).unwrap(),
            fs::read(capped_out.join("series.csv")).unwrap()
        );

        std::env::set_var("STREAM_WORKERS", "zero");
        let err = run(&cfg, &data, &dir.path().join("bad"), &RunOptions::default());
        std::env::remove_var("STREAM_WORKERS");
        assert!(matches!(err.unwrap_err(), ExperimentError::Config(_)));
    }

    #[test]
    fn report_lists_missing_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&tiny_config_text()).unwrap();
        let data = dir.path().join("data.csv");
        generate(&cfg, &data).unwrap();
        let out = dir.path().join("run");
        run(&cfg, &data, &out, &RunOptions::default()).unwrap();

        // Drop every incremental row from the series file.
        let series_path = out.join("series.csv");
        let text = fs::read_to_string(&series_path).unwrap();
        let kept: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with("incremental"))
            .collect();
        fs::write(&series_path, kept.join("\n") + "\n").unwrap();

        let err = report(&out, PairingMode::PerRealization).unwrap_err();
        match err {
            ExperimentError::MissingSeries(pairs) => {
                assert_eq!(
                    pairs,
                    vec![(MethodKind::Incremental, 0), (MethodKind::Incremental, 1)]
                );
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn report_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&tiny_config_text()).unwrap();
        let data = dir.path().join("data.csv");
        generate(&cfg, &data).unwrap();
        let out = dir.path().join("run");
        run(&cfg, &data, &out, &RunOptions::default()).unwrap();
        report(&out, PairingMode::PerRealization).unwrap();
        let first = fs::read(out.join("summary.csv")).unwrap();
        report(&out, PairingMode::PerRealization).unwrap();
        let second = fs::read(out.join("summary.csv")).unwrap();
        assert_eq!(first, second);
    }
}
