//! Recompute the flip columns of a trace from `lf_raw` alone.

use crate::asr::FlipConfig;
use crate::error::{Error, Result};
use crate::harness::StepRow;
use crate::policy::{PolicyConfig, PolicyState};

#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub step: u64,
    pub column: &'static str,
    pub recorded: String,
    pub replayed: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "unset".into())
}

/// Feed every recorded `lf_raw` through a fresh policy and compare the
/// smoothed value, minimum estimate, arming flag and trigger flag with the
/// recorded ones. Returns the first divergence, if any.
pub fn replay(rows: &[StepRow], policy: &PolicyConfig, flip: &FlipConfig, seed: u64) -> Result<Option<Divergence>> {
    if rows.is_empty() {
        return Err(Error::Format("trace has no rows".into()));
    }
    let mut state = PolicyState::new(policy.clone(), flip.clone(), seed)?;
    for r in rows {
        let s = state.decide(r.step, r.lf_raw)?;
        let diff = |column, recorded: String, replayed: String| Divergence {
            step: r.step,
            column,
            recorded,
            replayed,
        };
        if s.lf_smoothed.to_bits() != r.lf_smoothed.to_bits() {
            return Ok(Some(diff("lf_smoothed", r.lf_smoothed.to_string(), s.lf_smoothed.to_string())));
        }
        if s.min_estimate.map(f64::to_bits) != r.min_estimate.map(f64::to_bits) {
            return Ok(Some(diff("min_estimate", fmt_opt(r.min_estimate), fmt_opt(s.min_estimate))));
        }
        if s.armed != r.armed {
            return Ok(Some(diff("armed", r.armed.to_string(), s.armed.to_string())));
        }
        if s.triggered != r.triggered {
            return Ok(Some(diff("triggered", r.triggered.to_string(), s.triggered.to_string())));
        }
    }
    Ok(None)
}
