//! Command-line front end.
//!
//! Exit codes: 0 success, 1 replay mismatch, 2 configuration or input
//! error, 3 training or numeric failure. Errors are reported on stderr as a
//! single JSON line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use asr_ctta::harness::{prepare_source, run_experiment, sweep, RunConfig, SweepGrid};
use asr_ctta::io::config::{config_hash, load_config};
use asr_ctta::io::{checkpoint, plot, replay, trace, write_atomic};
use asr_ctta::model::ModelState;
use asr_ctta::stream::{build_schedule, StreamState};
use asr_ctta::Error;

#[derive(Parser)]
#[command(name = "asr-ctta", version, about = "Continual test-time adaptation testbed")]
struct Cli {
    /// Run config (TOML, or JSON with a .json extension). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the config seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Directory for outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for `sweep`.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and write a checkpoint.
    TrainSource {
        /// Checkpoint path (default: <out-dir>/source.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one experiment and write its trace and trigger log.
    Run {
        /// Source checkpoint; trained from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a parameter grid and write a results table.
    Sweep(SweepArgs),
    /// Recompute the flip columns of a trace and compare.
    ReplayTrace(ReplayArgs),
    /// Draw traces as an SVG chart.
    Plot {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Output path (default: <out-dir>/plot.svg).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Accuracy window (default: the first trace's configured window).
        #[arg(long)]
        window: Option<usize>,
    },
    /// Write the first batches of the stream as CSV.
    DumpStream {
        #[arg(long, default_value_t = 10)]
        batches: u64,
        /// Output path (default: <out-dir>/stream.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Grid file (TOML) with any of: interval, pi, lambda, gamma, lr.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    interval: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    pi: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    gamma: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    lr: Vec<f64>,
    /// Output path (default: <out-dir>/sweep.csv).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    trace: PathBuf,
    #[arg(long)]
    pi: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Neighborhood radius around the minimum.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
}

enum Failure {
    Lib { error: Error, step: Option<u64> },
    Mismatch,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure::Lib { error, step: None }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric { .. } | Error::Training { .. } | Error::Degenerate(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", json!({"error": {"kind": "usage", "message": msg.trim()}}));
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Mismatch) => ExitCode::from(1),
        Err(Failure::Lib { error, step }) => {
            let step = step.or(match &error {
                Error::Numeric { step, .. } => *step,
                Error::Training { step, .. } => Some(*step),
                _ => None,
            });
            eprintln!(
                "{}",
                json!({"error": {"kind": error.kind(), "message": error.to_string(), "step": step}})
            );
            ExitCode::from(exit_code(&error))
        }
    }
}

fn load(cli: &Cli) -> Result<RunConfig, Error> {
    let mut config = match &cli.config {
        Some(p) => load_config(p)?,
        None => {
            let mut c = RunConfig::default();
            c.materialize();
            c
        }
    };
    if let Some(seed) = cli.seed_override {
        config.seed = seed;
        config.validate()?;
    }
    Ok(config)
}

fn source_model(config: &RunConfig, checkpoint: Option<&Path>) -> Result<ModelState, Error> {
    match checkpoint {
        Some(p) => {
            let m = checkpoint::load(p)?;
            if m.arch() != &config.architecture {
                return Err(Error::Config(format!(
                    "checkpoint {} architecture does not match the config",
                    p.display()
                )));
            }
            Ok(m)
        }
        None => Ok(prepare_source(config)?.model),
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::TrainSource { checkpoint: path } => {
            let config = load(cli)?;
            let trained = prepare_source(&config)?;
            let path = path.clone().unwrap_or_else(|| cli.out_dir.join("source.ckpt"));
            checkpoint::save(&trained.model, &path)?;
            println!(
                "{}",
                json!({
                    "clean_accuracy": trained.clean_accuracy,
                    "checkpoint": path.display().to_string(),
                    "config_sha256": config_hash(&config),
                })
            );
            Ok(())
        }
        Command::Run { checkpoint: ckpt } => {
            let config = load(cli)?;
            let source = source_model(&config, ckpt.as_deref())?;
            let trace_path = cli.out_dir.join(&config.output.trace_file);
            let events_path = cli.out_dir.join(&config.output.events_file);
            let (record, failure) = match run_experiment(&config, &source) {
                Ok(r) => (r, None),
                Err(f) => (f.record, Some((f.error, f.step))),
            };
            trace::write_trace(&trace_path, &config, &record.rows)?;
            trace::write_events(&events_path, &record.events)?;
            if let Some((error, step)) = failure {
                return Err(Failure::Lib { error, step: Some(step) });
            }
            println!(
                "{}",
                json!({
                    "steps": record.len(),
                    "mean_accuracy": record.mean_accuracy(),
                    "final_quarter_accuracy": record.final_quarter_accuracy(),
                    "triggers": record.trigger_count(),
                    "trace": trace_path.display().to_string(),
                    "events": events_path.display().to_string(),
                })
            );
            Ok(())
        }
        Command::Sweep(args) => {
            let config = load(cli)?;
            let mut grid = match &args.grid {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| Error::Config(format!("cannot read grid {}: {e}", p.display())))?;
                    toml::from_str::<SweepGrid>(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => SweepGrid::default(),
            };
            grid.interval.extend(&args.interval);
            grid.pi.extend(&args.pi);
            grid.lambda.extend(&args.lambda);
            grid.gamma.extend(&args.gamma);
            grid.lr.extend(&args.lr);
            let source = source_model(&config, args.checkpoint.as_deref())?;
            let rows = sweep(&config, &grid, &source, cli.threads)?;
            let path = args.output.clone().unwrap_or_else(|| cli.out_dir.join("sweep.csv"));
            write_atomic(&path, &trace::render_sweep(&config, &rows)?)?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!(
                "{}",
                json!({"cells": rows.len(), "failed": failed, "table": path.display().to_string()})
            );
            Ok(())
        }
        Command::ReplayTrace(args) => {
            let file = trace::read_trace(&args.trace)?;
            let config = match &cli.config {
                Some(_) => load(cli)?,
                None => file
                    .config()?
                    .ok_or_else(|| Error::Format("trace carries no config; pass --config".into()))?,
            };
            let mut flip = config.flip.clone();
            if let Some(v) = args.pi {
                flip.pi = v;
            }
            if let Some(v) = args.beta {
                flip.beta = v;
            }
            if let Some(v) = args.k {
                flip.neighborhood_radius = v;
            }
            if let Some(v) = args.burn_in {
                flip.burn_in = v;
            }
            flip.validate()?;
            match replay::replay(&file.rows, &config.policy, &flip, config.seed)? {
                None => {
                    println!("{}", json!({"replay": "match", "steps": file.rows.len()}));
                    Ok(())
                }
                Some(d) => {
                    println!(
                        "{}",
                        json!({
                            "replay": "mismatch",
                            "step": d.step,
                            "column": d.column,
                            "recorded": d.recorded,
                            "replayed": d.replayed,
                        })
                    );
                    Err(Failure::Mismatch)
                }
            }
        }
        Command::Plot { traces, output, window } => {
            let files = traces
                .iter()
                .map(|p| trace::read_trace(p).map_err(|e| Error::Format(format!("{}: {e}", p.display()))))
                .collect::<Result<Vec<_>, _>>()?;
            let window = match window {
                Some(w) => *w,
                None => files[0].config()?.map(|c| c.output.window).unwrap_or(500),
            };
            let labeled: Vec<plot::Labeled> = traces
                .iter()
                .zip(&files)
                .map(|(p, t)| plot::Labeled {
                    label: p.display().to_string(),
                    trace: t,
                })
                .collect();
            let svg = plot::render_svg(&labeled, window)?;
            let path = output.clone().unwrap_or_else(|| cli.out_dir.join("plot.svg"));
            write_atomic(&path, svg.as_bytes())?;
            println!("{}", json!({"svg": path.display().to_string()}));
            Ok(())
        }
        Command::DumpStream { batches, output } => {
            let config = load(cli)?;
            let schedule = build_schedule(&config.schedule, config.seed)?;
            let mut stream = StreamState::new(
                schedule,
                config.source_distribution()?,
                config.corruption.clone(),
                config.seed,
            )?;
            let d = config.architecture.input_dim;
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["step".to_string(), "label".to_string()];
            header.extend((0..d).map(|i| format!("x{i}")));
            let csv_err = |e: csv::Error| Error::Format(e.to_string());
            w.write_record(&header).map_err(csv_err)?;
            for _ in 0..*batches {
                let t = stream.cursor();
                let Some((batch, _)) = stream.sample_batch(config.stream.batch_size)? else {
                    break;
                };
                let labels = batch.labels.unwrap_or_default();
                for (i, row) in batch.features.iter_rows().enumerate() {
                    let mut rec = vec![t.to_string(), labels[i].to_string()];
                    rec.extend(row.iter().map(|v| v.to_string()));
                    w.write_record(&rec).map_err(csv_err)?;
                }
            }
            let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            let path = output.clone().unwrap_or_else(|| cli.out_dir.join("stream.csv"));
            write_atomic(&path, &bytes)?;
            println!("{}", json!({"csv": path.display().to_string()}));
            Ok(())
        }
    }
}
