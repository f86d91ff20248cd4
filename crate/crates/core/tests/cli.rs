use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use asr_ctta::harness::prepare_source;
use asr_ctta::io::config::{echo, load_config};
use asr_ctta::io::{checkpoint, trace};

const SMOKE: &str = r#"
seed = 11
[schedule]
mode = "generated"
num_segments = 3
hold_steps = 1500
transition_steps = 250
min_severity = 2.0
max_severity = 5.0
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_asr-ctta"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(o.stderr.trim_ascii()).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&o.stderr)))
}

#[test]
fn train_source_writes_a_reloadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMOKE);
    let ckpt = dir.path().join("m.ckpt");
    let o = run(&["--config", s(&cfg), "train-source", "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(out["clean_accuracy"].as_f64().unwrap() > 0.8);
    let loaded = checkpoint::load(&ckpt).unwrap();
    let trained = prepare_source(&load_config(&cfg).unwrap()).unwrap().model;
    assert_eq!(loaded.theta(), trained.theta());
    assert_eq!(loaded.theta_pre(), trained.theta_pre());
    assert_eq!(loaded.stats(), trained.stats());
    assert_eq!(loaded.source_stats(), trained.source_stats());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "[shrink_restore]\nlambda = 0.25\ngamma = 0.75\n");
    let o = run(&["--config", s(&bad), "train-source"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("lambda + gamma < 1"));

    let o = run(&["--config", s(&dir.path().join("missing.toml")), "train-source"]);
    assert_eq!(o.status.code(), Some(2));

    let unknown = write(dir.path(), "u.toml", "[policy]\nkind = \"asr\"\nwindow = 3\n");
    assert_eq!(run(&["--config", s(&unknown), "run"]).status.code(), Some(2));
}

#[test]
fn run_replay_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMOKE);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let started = Instant::now();
    let o = run(&["--config", s(&cfg), "--out-dir", s(&out_a), "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(started.elapsed().as_secs() < 60);
    assert!(run(&["--config", s(&cfg), "--out-dir", s(&out_b), "run"]).status.success());
    let ta = std::fs::read(out_a.join("trace.csv")).unwrap();
    assert_eq!(ta, std::fs::read(out_b.join("trace.csv")).unwrap());

    let parsed = trace::read_trace(&out_a.join("trace.csv")).unwrap();
    assert_eq!(parsed.rows.len(), 5000);
    let triggers = parsed.rows.iter().filter(|r| r.triggered).count();
    assert!(triggers > 0);
    let events = trace::parse_events(&std::fs::read_to_string(out_a.join("triggers.jsonl")).unwrap()).unwrap();
    assert_eq!(events.len(), triggers);

    let trace_a = out_a.join("trace.csv");
    assert_eq!(run(&["replay-trace", s(&trace_a)]).status.code(), Some(0));
    let o = run(&["replay-trace", s(&trace_a), "--pi", "1.7"]);
    assert_eq!(o.status.code(), Some(1));

    // tamper with one smoothed value
    let text = String::from_utf8(ta).unwrap();
    let target = parsed.rows[1234].lf_smoothed.to_string();
    let lines: Vec<String> = text
        .lines()
        .map(|l| {
            if l.starts_with("1234,") {
                l.replacen(&format!(",{target},"), ",0.125,", 1)
            } else {
                l.to_string()
            }
        })
        .collect();
    let tampered = write(dir.path(), "t.csv", &(lines.join("\n") + "\n"));
    let o = run(&["replay-trace", s(&tampered)]);
    assert_eq!(o.status.code(), Some(1));
    let msg: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(msg["step"], 1234);
    assert_eq!(msg["column"], "lf_smoothed");

    let svg = dir.path().join("p.svg");
    assert!(run(&["plot", s(&trace_a), "--output", s(&svg)]).status.success());
    let body = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(body.matches("<polyline").count(), 3);
    assert_eq!(body.matches(r#"class="trigger""#).count(), triggers);
    assert!(run(&["plot", s(&trace_a), s(&trace_a), "--output", s(&svg)]).status.success());
    let body = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(body.matches("<polyline").count(), 6);

    let empty = write(dir.path(), "empty.csv", "");
    assert_eq!(run(&["plot", s(&empty), "--output", s(&svg)]).status.code(), Some(2));
    let header_only = write(dir.path(), "h.csv", &(trace::COLUMNS.join(",") + "\n"));
    assert_eq!(run(&["plot", s(&header_only), "--output", s(&svg)]).status.code(), Some(2));
}

#[test]
fn echoed_config_reproduces_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &format!("{SMOKE}\n[policy]\nkind = \"no-reset\"\n"));
    let a = dir.path().join("a");
    assert!(run(&["--config", s(&cfg), "--out-dir", s(&a), "run"]).status.success());
    let first = trace::read_trace(&a.join("trace.csv")).unwrap();
    assert!(first.rows.iter().all(|r| !r.triggered));
    let echoed = write(dir.path(), "echo.json", first.config_json.as_ref().unwrap());
    let b = dir.path().join("b");
    assert!(run(&["--config", s(&echoed), "--out-dir", s(&b), "run"]).status.success());
    assert_eq!(
        std::fs::read(a.join("trace.csv")).unwrap(),
        std::fs::read(b.join("trace.csv")).unwrap()
    );
    let cfg_loaded = load_config(&echoed).unwrap();
    assert_eq!(echo(&cfg_loaded), *first.config_json.as_ref().unwrap());
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMOKE);
    let a = dir.path().join("a");
    assert!(run(&["--config", s(&cfg), "--seed-override", "5", "--out-dir", s(&a), "dump-stream", "--batches", "3"]).status.success());
    let text = std::fs::read_to_string(a.join("stream.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 64);
    assert!(text.starts_with("step,label,x0,"));
    let b = dir.path().join("b");
    assert!(run(&["--config", s(&cfg), "--out-dir", s(&b), "dump-stream", "--batches", "3"]).status.success());
    assert_ne!(text, std::fs::read_to_string(b.join("stream.csv")).unwrap());
}

#[test]
fn numeric_failure_exits_3_and_keeps_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &format!("{SMOKE}\n[adapter]\nmethod = \"eata-lite\"\nanchor_weight = 1e300\nentropy_threshold = 10.0\n"),
    );
    let o = run(&["--config", s(&cfg), "--out-dir", s(dir.path()), "run"]);
    assert_eq!(o.status.code(), Some(3));
    let e = stderr_json(&o);
    assert_eq!(e["error"]["kind"], "numeric");
    let step = e["error"]["step"].as_u64().unwrap();
    let partial = trace::read_trace(&dir.path().join("trace.csv")).unwrap();
    assert_eq!(partial.rows.len() as u64, step);
}

#[test]
fn sweep_table_carries_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "[schedule]\nmode = \"generated\"\nnum_segments = 2\nhold_steps = 200\ntransition_steps = 50\nmin_severity = 1.0\nmax_severity = 3.0\n",
    );
    let table = dir.path().join("s.csv");
    let o = run(&[
        "--config", s(&cfg), "--threads", "2", "sweep", "--interval", "50,100", "--lambda", "0.2,0.3", "--gamma", "0.75",
        "--output", s(&table),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    let hash = asr_ctta::io::config::config_hash(&load_config(&cfg).unwrap());
    assert_eq!(text.lines().next().unwrap(), format!("# base-config-sha256: {hash}"));
    assert_eq!(text.lines().count(), 2 + 4);
    assert_eq!(text.matches("lambda + gamma < 1").count(), 2);
}
