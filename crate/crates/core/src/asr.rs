//! Adaptive shrink-restore: label-flip scoring, smoothing, minimum tracking,
//! the fluctuation trigger and the shrink-restore re-initialization.
//!
//! The per-step flow is
//!
//! ```text
//! LF_t  = sum_i [pred_t(i) != pred_{t-1}(i)] * c_i * (c_{i,t} - c_{i,t-1})
//! S_t   = beta * S_{t-1} + (1 - beta) * LF_t          (S_0 = LF_0)
//! Min   = mean of S over [argmin S - k, argmin S + k] (clipped)
//! fire  = armed && S_t > pi * Min
//! theta = lambda * theta_t + gamma * theta_pre         (lambda + gamma < 1)
//! ```
//!
//! Everything after the flip score operates on scalars only, so a recorded
//! `lf_raw` column is enough to reproduce every trigger decision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{l2_norm, ModelState, ProbOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlipConfig {
    /// EMA coefficient in `[0, 1)`.
    pub beta: f64,
    /// Maximum allowed fluctuation above the minimum, `> 1`.
    pub pi: f64,
    /// Half-width `k` of the window averaged around the minimum.
    pub neighborhood_radius: usize,
    /// Steps after a re-initialization before the trigger may arm.
    pub burn_in: usize,
}

impl Default for FlipConfig {
    fn default() -> Self {
        Self {
            beta: 0.8,
            pi: 1.2,
            neighborhood_radius: 2,
            burn_in: 200,
        }
    }
}

impl FlipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config(format!("flip.beta = {} must lie in [0, 1)", self.beta)));
        }
        if !(self.pi > 1.0 && self.pi.is_finite()) {
            return Err(Error::config(format!("flip.pi = {} must be > 1", self.pi)));
        }
        if self.burn_in == 0 {
            return Err(Error::config("flip.burn_in must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShrinkRestoreConfig {
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for ShrinkRestoreConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            gamma: 0.75,
        }
    }
}

impl ShrinkRestoreConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.lambda) {
            return Err(Error::config(format!("shrink_restore.lambda = {} must lie in (0, 1)", self.lambda)));
        }
        if !open_unit(self.gamma) {
            return Err(Error::config(format!("shrink_restore.gamma = {} must lie in (0, 1)", self.gamma)));
        }
        if self.lambda + self.gamma >= 1.0 {
            return Err(Error::config(format!(
                "constraint lambda + gamma < 1 violated: {} + {} = {}",
                self.lambda,
                self.gamma,
                self.lambda + self.gamma
            )));
        }
        Ok(())
    }

    /// Norm the iterated blend converges to, `gamma / (1 - lambda) * |theta_pre|`.
    pub fn fixed_point_norm(&self, theta_pre_norm: f64) -> f64 {
        self.gamma / (1.0 - self.lambda) * theta_pre_norm
    }
}

/// Confidence-weighted label-flip score between two predictions of the same
/// batch.
///
/// For every sample whose predicted class changed, the contribution is
/// `c * (c_after - c_before)` where `c = c_after` is the new model's
/// probability of its new class and `c_before` the old model's probability
/// of that same class. Contributions are not clamped.
pub fn label_flip_score(before: &ProbOutput, after: &ProbOutput) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::Contract(format!(
            "label flip needs predictions of one batch: {} vs {} rows",
            before.len(),
            after.len()
        )));
    }
    let mut lf = 0.0;
    for i in 0..after.len() {
        let new = after.predicted[i];
        if new == before.predicted[i] {
            continue;
        }
        let c_now = after.probs.get(i, new);
        let c_prev = before.probs.get(i, new);
        lf += c_now * (c_now - c_prev);
    }
    Ok(lf)
}

/// Flip history since the last re-initialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlipTrace {
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub min_estimate: Option<f64>,
    pub min_index: Option<usize>,
    pub armed: bool,
    pub steps_since_reinit: usize,
}

impl FlipTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> Option<f64> {
        self.smoothed.last().copied()
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }
}

/// Append `lf` and its exponential moving average. The first value after a
/// re-initialization seeds the average.
pub fn ema_update(trace: &mut FlipTrace, lf: f64, config: &FlipConfig) {
    let s = match trace.smoothed.last() {
        None => lf,
        Some(&prev) => config.beta * prev + (1.0 - config.beta) * lf,
    };
    trace.raw.push(lf);
    trace.smoothed.push(s);
    trace.steps_since_reinit += 1;
}

/// Track the lowest smoothed value (first occurrence on ties), average it
/// with its clipped neighborhood, and arm once burn-in has elapsed and the
/// newest value is no longer the minimum.
///
/// The minimum may move to a later, lower point after arming; `Min` is then
/// re-estimated around it.
pub fn update_min(trace: &mut FlipTrace, config: &FlipConfig) -> Result<()> {
    let len = trace.smoothed.len();
    if len == 0 {
        return Err(Error::Contract("update_min on an empty flip trace".into()));
    }
    let last = len - 1;
    let idx = match trace.min_index {
        Some(m) if m < len && trace.smoothed[last] >= trace.smoothed[m] => m,
        Some(m) if m < len => last,
        _ => {
            // rescan keeps the first occurrence on ties
            let mut best = 0;
            for (i, &v) in trace.smoothed.iter().enumerate() {
                if v < trace.smoothed[best] {
                    best = i;
                }
            }
            best
        }
    };
    let k = config.neighborhood_radius;
    let lo = idx.saturating_sub(k);
    let hi = (idx + k).min(last);
    let window = &trace.smoothed[lo..=hi];
    trace.min_index = Some(idx);
    trace.min_estimate = Some(window.iter().sum::<f64>() / window.len() as f64);
    if !trace.armed && trace.steps_since_reinit >= config.burn_in && idx != last {
        trace.armed = true;
    }
    Ok(())
}

pub fn should_trigger(trace: &FlipTrace, config: &FlipConfig) -> bool {
    match (trace.armed, trace.min_estimate, trace.current()) {
        (true, Some(min), Some(cur)) => cur > config.pi * min,
        _ => false,
    }
}

/// `lambda * theta_t + gamma * theta_pre`, elementwise.
pub fn shrink_restore(theta_t: &[f64], theta_pre: &[f64], config: &ShrinkRestoreConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if theta_t.len() != theta_pre.len() {
        return Err(Error::shape(theta_pre.len(), theta_t.len()));
    }
    Ok(theta_t
        .iter()
        .zip(theta_pre)
        .map(|(t, p)| config.lambda * t + config.gamma * p)
        .collect())
}

/// How a re-initialization rewrites the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReinitMode {
    /// Parameters and statistics back to the source snapshot.
    FullRestore,
    /// Parameters blended by shrink-restore, statistics back to the source.
    ShrinkRestore,
}

/// Weight norms around one re-initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReinitReport {
    pub pre_norm: f64,
    pub post_norm: f64,
}

pub fn reinitialize(model: &mut ModelState, mode: ReinitMode, sr: &ShrinkRestoreConfig) -> Result<ReinitReport> {
    let pre_norm = model.weight_l2_norm();
    match mode {
        ReinitMode::FullRestore => model.restore_source(),
        ReinitMode::ShrinkRestore => {
            let blended = shrink_restore(model.theta(), model.theta_pre(), sr)?;
            model.set_theta(blended)?;
            model.restore_source_stats();
        }
    }
    Ok(ReinitReport {
        pre_norm,
        post_norm: l2_norm(model.theta()),
    })
}

/// Values of the flip trace at one step, taken before any clearing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlipSnapshot {
    pub lf_raw: f64,
    pub lf_smoothed: f64,
    pub min_estimate: Option<f64>,
    pub armed: bool,
    pub triggered: bool,
}

/// Runs the scalar part of the policy: smoothing, minimum, trigger.
#[derive(Clone, Debug)]
pub struct FlipMonitor {
    config: FlipConfig,
    trace: FlipTrace,
}

impl FlipMonitor {
    pub fn new(config: FlipConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            trace: FlipTrace::new(),
        })
    }

    pub fn config(&self) -> &FlipConfig {
        &self.config
    }

    pub fn trace(&self) -> &FlipTrace {
        &self.trace
    }

    /// Feed one raw score; `triggered` in the snapshot is the adaptive
    /// trigger decision for this step.
    pub fn observe(&mut self, lf: f64) -> Result<FlipSnapshot> {
        if !lf.is_finite() {
            return Err(Error::numeric(format!("non-finite label-flip score {lf}")));
        }
        ema_update(&mut self.trace, lf, &self.config);
        update_min(&mut self.trace, &self.config)?;
        let triggered = should_trigger(&self.trace, &self.config);
        Ok(FlipSnapshot {
            lf_raw: lf,
            lf_smoothed: self.trace.current().unwrap_or(lf),
            min_estimate: self.trace.min_estimate,
            armed: self.trace.armed,
            triggered,
        })
    }

    /// Forget everything since the last re-initialization.
    pub fn reset(&mut self) {
        self.trace.clear();
    }
}

/// Full adaptive shrink-restore step on a model.
#[derive(Clone, Debug)]
pub struct AsrController {
    monitor: FlipMonitor,
    shrink: ShrinkRestoreConfig,
    mode: ReinitMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsrOutcome {
    pub snapshot: FlipSnapshot,
    pub reinit: Option<ReinitReport>,
}

impl AsrController {
    pub fn new(flip: FlipConfig, shrink: ShrinkRestoreConfig, mode: ReinitMode) -> Result<Self> {
        shrink.validate()?;
        Ok(Self {
            monitor: FlipMonitor::new(flip)?,
            shrink,
            mode,
        })
    }

    pub fn monitor(&self) -> &FlipMonitor {
        &self.monitor
    }

    /// Score the step, update the trace, and re-initialize the model if the
    /// smoothed flip rose above `pi * Min`. On a trigger the trace is cleared.
    pub fn step(&mut self, model: &mut ModelState, before: &ProbOutput, after: &ProbOutput) -> Result<AsrOutcome> {
        let lf = label_flip_score(before, after)?;
        let snapshot = self.monitor.observe(lf)?;
        let reinit = if snapshot.triggered {
            let r = reinitialize(model, self.mode, &self.shrink)?;
            self.monitor.reset();
            Some(r)
        } else {
            None
        };
        Ok(AsrOutcome { snapshot, reinit })
    }
}
