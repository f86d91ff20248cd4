//! Experiment loop: stream → adapter → policy → log, plus paired plasticity
//! comparison and parameter sweeps.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptStepResult, Adapter, AdapterConfig};
use crate::asr::{label_flip_score, reinitialize, FlipConfig, ReinitMode, ShrinkRestoreConfig};
use crate::error::{Error, Result};
use crate::model::{accuracy, train_source, Architecture, ModelState, SourceTraining, TrainedSource};
use crate::policy::{PolicyConfig, PolicyState};
use crate::stream::{
    build_schedule, CorruptionKind, CorruptionParams, ScheduleConfig, SourceDistribution, StreamState, TaskConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub batch_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { batch_size: 64 }
    }
}

/// File names (relative to the output directory) and the accuracy window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub trace_file: String,
    pub events_file: String,
    pub window: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            trace_file: "trace.csv".into(),
            events_file: "triggers.jsonl".into(),
            window: 500,
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub source: SourceTraining,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub corruption: CorruptionParams,
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub flip: FlipConfig,
    #[serde(default)]
    pub shrink_restore: ShrinkRestoreConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            architecture: Architecture::default(),
            task: TaskConfig::default(),
            source: SourceTraining::default(),
            schedule: ScheduleConfig::default(),
            corruption: CorruptionParams::default(),
            stream: StreamConfig::default(),
            adapter: AdapterConfig::default(),
            policy: PolicyConfig::default(),
            flip: FlipConfig::default(),
            shrink_restore: ShrinkRestoreConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.architecture.validate()?;
        self.source.validate()?;
        self.corruption.validate()?;
        if self.stream.batch_size == 0 {
            return Err(Error::config("stream.batch_size must be >= 1"));
        }
        if self.output.window == 0 {
            return Err(Error::config("output.window must be >= 1"));
        }
        self.adapter.validate()?;
        self.policy.validate()?;
        self.flip.validate()?;
        self.shrink_restore.validate()?;
        build_schedule(&self.schedule, self.seed)?;
        Ok(())
    }

    /// Fill architecture-dependent defaults so the echoed config is complete.
    pub fn materialize(&mut self) {
        self.adapter.materialize(self.architecture.num_classes);
    }

    pub fn source_distribution(&self) -> Result<SourceDistribution> {
        SourceDistribution::new(
            self.architecture.input_dim,
            self.architecture.num_classes,
            &self.task,
            self.seed,
        )
    }
}

/// Train the source model described by a config.
pub fn prepare_source(config: &RunConfig) -> Result<TrainedSource> {
    config.architecture.validate()?;
    config.source.validate()?;
    let dist = config.source_distribution()?;
    let data = dist.labeled_set(config.source.samples, config.seed);
    train_source(&config.architecture, &data, &config.source, config.seed)
}

/// One logged stream step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub domain: CorruptionKind,
    pub severity: f64,
    pub accuracy: f64,
    pub lf_raw: f64,
    pub lf_smoothed: f64,
    pub min_estimate: Option<f64>,
    pub armed: bool,
    pub triggered: bool,
    pub weight_norm: f64,
    pub num_selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub step: u64,
    pub policy: String,
    pub pre_norm: f64,
    pub post_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<StepRow>,
    pub events: Vec<TriggerEvent>,
    pub initial_norm: f64,
}

impl RunRecord {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.accuracy).collect()
    }

    pub fn mean_accuracy(&self) -> f64 {
        mean(&self.accuracies())
    }

    /// Mean accuracy over the last quarter of the steps.
    pub fn final_quarter_accuracy(&self) -> f64 {
        let n = self.rows.len();
        mean(&self.accuracies()[n - n / 4..])
    }

    pub fn trigger_count(&self) -> usize {
        self.rows.iter().filter(|r| r.triggered).count()
    }

    pub fn trigger_steps(&self) -> Vec<u64> {
        self.rows.iter().filter(|r| r.triggered).map(|r| r.step).collect()
    }

    pub fn windowed_accuracy(&self, window: usize) -> Vec<f64> {
        window_means(&self.accuracies(), window)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Means of consecutive windows; the last window may be shorter.
pub fn window_means(v: &[f64], window: usize) -> Vec<f64> {
    v.chunks(window.max(1)).map(mean).collect()
}

/// A run that stopped early, with everything logged before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub record: RunRecord,
    pub step: u64,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run failed at step {}: {}", self.step, self.error)
    }
}

impl std::error::Error for RunFailure {}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        RunFailure {
            record: RunRecord::default(),
            step: 0,
            error,
        }
    }
}

/// Optional per-step hook, used by tests to watch the model.
pub trait StepObserver {
    fn observe(&mut self, step: u64, model: &ModelState, result: &AdaptStepResult, row: &StepRow);
}

impl StepObserver for () {
    fn observe(&mut self, _: u64, _: &ModelState, _: &AdaptStepResult, _: &StepRow) {}
}

pub fn run_experiment(config: &RunConfig, source: &ModelState) -> std::result::Result<RunRecord, RunFailure> {
    run_experiment_observed(config, source, &mut ())
}

pub fn run_experiment_observed(
    config: &RunConfig,
    source: &ModelState,
    observer: &mut impl StepObserver,
) -> std::result::Result<RunRecord, RunFailure> {
    config.validate()?;
    if source.arch() != &config.architecture {
        return Err(Error::config("source model architecture does not match the config").into());
    }
    let mut model = source.clone();
    let schedule = build_schedule(&config.schedule, config.seed)?;
    let mut stream = StreamState::new(
        schedule,
        config.source_distribution()?,
        config.corruption.clone(),
        config.seed,
    )?;
    let mut adapter = Adapter::new(config.adapter.clone(), &model)?;
    let mut policy = PolicyState::new(config.policy.clone(), config.flip.clone(), config.seed)?;
    let reinit_mode = config.policy.reinit_mode().unwrap_or(ReinitMode::FullRestore);
    let mut record = RunRecord {
        rows: Vec::with_capacity(stream.schedule().total_steps() as usize),
        events: Vec::new(),
        initial_norm: model.weight_l2_norm(),
    };
    let policy_name = config.policy.name().to_string();

    loop {
        let t = stream.cursor();
        let step = (|| -> Result<Option<(StepRow, AdaptStepResult)>> {
            let Some((batch, blend)) = stream.sample_batch(config.stream.batch_size)? else {
                return Ok(None);
            };
            let result = adapter.step(&mut model, &batch.features)?;
            let labels = batch.labels.as_deref().unwrap_or(&[]);
            let acc = accuracy(&result.preds_before.predicted, labels);
            let lf = label_flip_score(&result.preds_before, &result.preds_after)?;
            let snap = policy.decide(t, lf)?;
            if snap.triggered {
                let report = reinitialize(&mut model, reinit_mode, &config.shrink_restore)?;
                adapter.reset();
                record.events.push(TriggerEvent {
                    step: t,
                    policy: policy_name.clone(),
                    pre_norm: report.pre_norm,
                    post_norm: report.post_norm,
                });
            }
            let row = StepRow {
                step: t,
                domain: blend.dominant(),
                severity: blend.severity(),
                accuracy: acc,
                lf_raw: snap.lf_raw,
                lf_smoothed: snap.lf_smoothed,
                min_estimate: snap.min_estimate,
                armed: snap.armed,
                triggered: snap.triggered,
                weight_norm: model.weight_l2_norm(),
                num_selected: result.num_selected,
            };
            Ok(Some((row, result)))
        })();
        match step {
            Ok(None) => break,
            Ok(Some((row, result))) => {
                observer.observe(t, &model, &result, &row);
                record.rows.push(row);
            }
            Err(e) => {
                return Err(RunFailure {
                    record,
                    step: t,
                    error: e.at_step(t),
                })
            }
        }
    }
    Ok(record)
}

/// Windowed mean accuracy of `a` minus that of `b`.
pub fn paired_gap(a: &RunRecord, b: &RunRecord, window: usize) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired records differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if window == 0 {
        return Err(Error::config("window must be >= 1"));
    }
    let wa = a.windowed_accuracy(window);
    let wb = b.windowed_accuracy(window);
    Ok(wa.iter().zip(&wb).map(|(x, y)| x - y).collect())
}

/// Axes of a parameter sweep; empty axes are not swept.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    /// Fixed-interval period `T`.
    pub interval: Vec<u64>,
    pub pi: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lr: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CellParams {
    pub interval: Option<u64>,
    pub pi: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub lr: Option<f64>,
}

fn axis<T: Copy>(v: &[T]) -> Vec<Option<T>> {
    if v.is_empty() {
        vec![None]
    } else {
        v.iter().copied().map(Some).collect()
    }
}

impl SweepGrid {
    /// Cartesian product in axis order (interval, pi, lambda, gamma, lr).
    pub fn cells(&self) -> Vec<CellParams> {
        let mut out = Vec::new();
        for interval in axis(&self.interval) {
            for pi in axis(&self.pi) {
                for lambda in axis(&self.lambda) {
                    for gamma in axis(&self.gamma) {
                        for lr in axis(&self.lr) {
                            out.push(CellParams {
                                interval,
                                pi,
                                lambda,
                                gamma,
                                lr,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

impl CellParams {
    /// Base config with this cell's overrides. Setting an interval turns the
    /// policy into a fixed-interval policy (keeping a fixed policy's reinit
    /// mode, full-restore otherwise).
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        if let Some(t) = self.interval {
            let reinit = match &c.policy {
                PolicyConfig::FixedInterval { reinit, .. } => *reinit,
                _ => ReinitMode::FullRestore,
            };
            c.policy = PolicyConfig::FixedInterval { interval: t, reinit };
        }
        if let Some(pi) = self.pi {
            c.flip.pi = pi;
        }
        if let Some(l) = self.lambda {
            c.shrink_restore.lambda = l;
        }
        if let Some(g) = self.gamma {
            c.shrink_restore.gamma = g;
        }
        if let Some(lr) = self.lr {
            c.adapter.set_lr(lr);
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub params: CellParams,
    pub outcome: std::result::Result<CellSummary, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub mean_accuracy: f64,
    pub final_quarter_accuracy: f64,
    pub triggers: usize,
    pub seconds: f64,
}

impl CellSummary {
    pub fn of(record: &RunRecord, seconds: f64) -> Self {
        Self {
            mean_accuracy: record.mean_accuracy(),
            final_quarter_accuracy: record.final_quarter_accuracy(),
            triggers: record.trigger_count(),
            seconds,
        }
    }
}

/// Run one cell; failures are reported in the row.
pub fn run_cell(index: usize, params: &CellParams, base: &RunConfig, source: &ModelState) -> SweepRow {
    let cfg = params.apply(base);
    let started = Instant::now();
    let outcome = match cfg.validate() {
        Err(e) => Err(format!("{}: {e}", e.kind())),
        Ok(()) => run_experiment(&cfg, source)
            .map(|r| CellSummary::of(&r, started.elapsed().as_secs_f64()))
            .map_err(|f| format!("{}: {}", f.error.kind(), f)),
    };
    SweepRow {
        index,
        params: params.clone(),
        outcome,
    }
}

/// Run every grid cell against one source model. Cells are independent and
/// run on `threads` workers; rows come back in cell order.
pub fn sweep(base: &RunConfig, grid: &SweepGrid, source: &ModelState, threads: usize) -> Result<Vec<SweepRow>> {
    let cells = grid.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let mut rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, p)| run_cell(i, p, base, source))
            .collect()
    });
    rows.sort_by_key(|r| r.index);
    Ok(rows)
}
