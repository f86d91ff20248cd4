//! Trace CSV, trigger event log and sweep table.
//!
//! A trace starts with `#` comment lines (tool version, config hash, config
//! echo) followed by a CSV header and one row per stream step. Floats use the
//! shortest representation that parses back to the same value.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::{RunConfig, StepRow, SweepRow, TriggerEvent};
use crate::stream::CorruptionKind;

use super::config::{config_hash, echo, parse_config, ConfigFormat};

pub const COLUMNS: [&str; 11] = [
    "step",
    "domain",
    "severity",
    "accuracy",
    "lf_raw",
    "lf_smoothed",
    "min_estimate",
    "armed",
    "triggered",
    "weight_norm",
    "num_selected",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceFile {
    pub tool_version: Option<String>,
    pub config_hash: Option<String>,
    pub config_json: Option<String>,
    pub rows: Vec<StepRow>,
}

impl TraceFile {
    /// The echoed run config, if the trace carries one.
    pub fn config(&self) -> Result<Option<RunConfig>> {
        self.config_json
            .as_deref()
            .map(|j| parse_config(j, ConfigFormat::Json))
            .transpose()
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn render_trace(config: &RunConfig, rows: &[StepRow]) -> Result<Vec<u8>> {
    let mut head = String::new();
    writeln!(head, "# tool: {}", super::TOOL_VERSION).unwrap();
    writeln!(head, "# config-sha256: {}", config_hash(config)).unwrap();
    writeln!(head, "# config: {}", echo(config)).unwrap();
    let mut w = csv::Writer::from_writer(head.into_bytes());
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.domain.tag().to_string(),
            r.severity.to_string(),
            r.accuracy.to_string(),
            r.lf_raw.to_string(),
            r.lf_smoothed.to_string(),
            r.min_estimate.map(|m| m.to_string()).unwrap_or_default(),
            r.armed.to_string(),
            r.triggered.to_string(),
            r.weight_norm.to_string(),
            r.num_selected.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn write_trace(path: &Path, config: &RunConfig, rows: &[StepRow]) -> Result<()> {
    super::write_atomic(path, &render_trace(config, rows)?)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::Format(format!("line {line}: bad {} value {raw:?}", COLUMNS[i])))
}

pub fn parse_trace(text: &str) -> Result<TraceFile> {
    let mut trace = TraceFile::default();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        let body = line.trim_start_matches('#').trim_start();
        if let Some(v) = body.strip_prefix("tool: ") {
            trace.tool_version = Some(v.to_string());
        } else if let Some(v) = body.strip_prefix("config-sha256: ") {
            trace.config_hash = Some(v.to_string());
        } else if let Some(v) = body.strip_prefix("config: ") {
            trace.config_json = Some(v.to_string());
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Format(format!("trace header {:?} does not match the expected columns", header)));
    }
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != COLUMNS.len() {
            return Err(Error::Format(format!("line {line}: expected {} fields", COLUMNS.len())));
        }
        let min = rec.get(6).unwrap_or("");
        trace.rows.push(StepRow {
            step: field(&rec, 0, line)?,
            domain: CorruptionKind::from_tag(rec.get(1).unwrap_or(""))
                .map_err(|e| Error::Format(format!("line {line}: {e}")))?,
            severity: field(&rec, 2, line)?,
            accuracy: field(&rec, 3, line)?,
            lf_raw: field(&rec, 4, line)?,
            lf_smoothed: field(&rec, 5, line)?,
            min_estimate: if min.is_empty() { None } else { Some(field(&rec, 6, line)?) },
            armed: field(&rec, 7, line)?,
            triggered: field(&rec, 8, line)?,
            weight_norm: field(&rec, 9, line)?,
            num_selected: field(&rec, 10, line)?,
        });
    }
    Ok(trace)
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read trace {}: {e}", path.display())))?;
    parse_trace(&text)
}

/// One JSON object per line.
pub fn render_events(events: &[TriggerEvent]) -> Vec<u8> {
    let mut out = Vec::new();
    for e in events {
        serde_json::to_writer(&mut out, e).expect("events serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_events(path: &Path, events: &[TriggerEvent]) -> Result<()> {
    super::write_atomic(path, &render_events(events))
}

pub fn parse_events(text: &str) -> Result<Vec<TriggerEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Sweep results in cell order. Timing is left out so the table depends
/// only on the inputs.
pub fn render_sweep(base: &RunConfig, rows: &[SweepRow]) -> Result<Vec<u8>> {
    let head = format!("# base-config-sha256: {}\n", config_hash(base));
    let mut w = csv::Writer::from_writer(head.into_bytes());
    w.write_record([
        "cell",
        "interval",
        "pi",
        "lambda",
        "gamma",
        "lr",
        "mean_accuracy",
        "final_quarter_accuracy",
        "triggers",
        "error",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let p = &r.params;
        let (mean, fq, trig, err) = match &r.outcome {
            Ok(s) => (
                s.mean_accuracy.to_string(),
                s.final_quarter_accuracy.to_string(),
                s.triggers.to_string(),
                String::new(),
            ),
            Err(e) => (String::new(), String::new(), String::new(), e.clone()),
        };
        w.write_record([
            r.index.to_string(),
            opt(p.interval),
            opt(p.pi),
            opt(p.lambda),
            opt(p.gamma),
            opt(p.lr),
            mean,
            fq,
            trig,
            err,
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}
