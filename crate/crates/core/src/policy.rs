//! Reset policies deciding when the adapted model is re-initialized.
//!
//! All policies feed the label-flip monitor so every trace carries the same
//! flip columns; only the adaptive policy acts on it. Decisions depend on
//! the step counter, the policy seed and the scalar flip score, never on
//! evaluation labels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asr::{FlipConfig, FlipMonitor, FlipSnapshot, ReinitMode};
use crate::error::{Error, Result};
use crate::seed::rng_for;

fn default_interval() -> u64 {
    1000
}

fn full_restore() -> ReinitMode {
    ReinitMode::FullRestore
}

fn shrink_restore() -> ReinitMode {
    ReinitMode::ShrinkRestore
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicyConfig {
    NoReset,
    FixedInterval {
        #[serde(default = "default_interval")]
        interval: u64,
        #[serde(default = "full_restore")]
        reinit: ReinitMode,
    },
    /// Intervals drawn uniformly from `[lo, hi]`.
    RandomInterval {
        lo: u64,
        hi: u64,
        #[serde(default = "full_restore")]
        reinit: ReinitMode,
    },
    Asr {
        #[serde(default = "shrink_restore")]
        reinit: ReinitMode,
    },
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig::Asr {
            reinit: ReinitMode::ShrinkRestore,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            PolicyConfig::FixedInterval { interval, .. } if *interval == 0 => {
                Err(Error::config("policy.interval must be >= 1"))
            }
            PolicyConfig::RandomInterval { lo, hi, .. } if *lo == 0 || lo > hi => {
                Err(Error::config(format!("policy interval range [{lo}, {hi}] needs 1 <= lo <= hi")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyConfig::NoReset => "no-reset",
            PolicyConfig::FixedInterval { .. } => "fixed-interval",
            PolicyConfig::RandomInterval { .. } => "random-interval",
            PolicyConfig::Asr { .. } => "asr",
        }
    }

    pub fn reinit_mode(&self) -> Option<ReinitMode> {
        match self {
            PolicyConfig::NoReset => None,
            PolicyConfig::FixedInterval { reinit, .. }
            | PolicyConfig::RandomInterval { reinit, .. }
            | PolicyConfig::Asr { reinit } => Some(*reinit),
        }
    }
}

/// Runtime state of a policy.
#[derive(Clone, Debug)]
pub struct PolicyState {
    config: PolicyConfig,
    monitor: FlipMonitor,
    since_reset: u64,
    next_interval: u64,
    rng: ChaCha8Rng,
    resets: u64,
}

impl PolicyState {
    pub fn new(config: PolicyConfig, flip: FlipConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut s = Self {
            config,
            monitor: FlipMonitor::new(flip)?,
            since_reset: 0,
            next_interval: 0,
            rng: rng_for(seed, "policy"),
            resets: 0,
        };
        s.draw_interval();
        Ok(s)
    }

    fn draw_interval(&mut self) {
        if let PolicyConfig::RandomInterval { lo, hi, .. } = self.config {
            self.next_interval = self.rng.random_range(lo..=hi);
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn monitor(&self) -> &FlipMonitor {
        &self.monitor
    }

    pub fn resets(&self) -> u64 {
        self.resets
    }

    /// Record the flip score of step `t` (0-based) and decide whether the
    /// model is re-initialized after it. The snapshot's `triggered` field is
    /// the policy decision; the flip trace is cleared when it fires.
    pub fn decide(&mut self, t: u64, lf: f64) -> Result<FlipSnapshot> {
        let mut snap = self.monitor.observe(lf)?;
        self.since_reset += 1;
        let fire = match &self.config {
            PolicyConfig::NoReset => false,
            PolicyConfig::FixedInterval { interval, .. } => t > 0 && t % interval == 0,
            PolicyConfig::RandomInterval { .. } => self.since_reset >= self.next_interval,
            PolicyConfig::Asr { .. } => snap.triggered,
        };
        snap.triggered = fire;
        if fire {
            self.monitor.reset();
            self.since_reset = 0;
            self.resets += 1;
            self.draw_interval();
        }
        Ok(snap)
    }
}
