#![allow(dead_code)]

use asr_ctta::harness::RunConfig;
use asr_ctta::model::{Architecture, ModelState, NormStats, StatsMode};
use asr_ctta::stream::ScheduleConfig;
use asr_ctta::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Short generated stream for harness and CLI tests.
pub fn short_config(seed: u64, segments: usize, hold: u64, transition: u64) -> RunConfig {
    let mut c = RunConfig {
        seed,
        schedule: ScheduleConfig::Generated {
            num_segments: segments,
            hold_steps: hold,
            transition_steps: transition,
            min_severity: 2.0,
            max_severity: 5.0,
        },
        ..RunConfig::default()
    };
    c.source.samples = 1000;
    c.source.epochs = 4;
    c.materialize();
    c
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A model with every parameter and statistic randomized away from its
/// initial value.
pub fn randomized_model(arch: &Architecture, seed: u64, mode: StatsMode) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ModelState::init(arch, seed).unwrap();
    let theta: Vec<f64> = m.theta().iter().map(|t| t + rng.random_range(-0.5..0.5)).collect();
    m.set_theta(theta).unwrap();
    let stats = m
        .stats()
        .iter()
        .map(|s| NormStats {
            mean: s.mean.iter().map(|_| rng.random_range(-0.5..0.5)).collect(),
            var: s.var.iter().map(|_| rng.random_range(0.5..2.0)).collect(),
        })
        .collect();
    m.set_stats(stats).unwrap();
    m.set_mode(mode);
    m
}

/// Weighted mean entropy evaluated through the plain forward pass.
pub fn weighted_entropy(model: &ModelState, x: &Matrix, weights: &[f64]) -> f64 {
    let p = model.predict(x).unwrap();
    let h = p.entropies();
    h.iter().zip(weights).map(|(h, w)| h * w).sum::<f64>() / x.rows() as f64
}

/// Central differences of `f` with respect to every parameter.
pub fn central_differences(model: &ModelState, h: f64, f: impl Fn(&ModelState) -> f64) -> Vec<f64> {
    let mut probe = model.clone();
    let base = model.theta().to_vec();
    (0..base.len())
        .map(|i| {
            let mut t = base.clone();
            t[i] = base[i] + h;
            probe.set_theta(t.clone()).unwrap();
            let up = f(&probe);
            t[i] = base[i] - h;
            probe.set_theta(t).unwrap();
            let down = f(&probe);
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Trigger steps of the adaptive policy, recomputed from scratch at every
/// step: smoothing restarts from the first value after each reset, the
/// minimum is found by a full scan, and arming is re-derived from the
/// history since the reset.
pub fn brute_force_triggers(seq: &[f64], beta: f64, pi: f64, k: usize, burn_in: usize) -> Vec<usize> {
    let mut fired = Vec::new();
    let mut start = 0;
    for t in 0..seq.len() {
        let seg = &seq[start..=t];
        let mut smoothed = Vec::with_capacity(seg.len());
        for (i, &v) in seg.iter().enumerate() {
            let s = if i == 0 { v } else { beta * smoothed[i - 1] + (1.0 - beta) * v };
            smoothed.push(s);
        }
        let n = smoothed.len();
        let argmin_at = |len: usize| {
            let mut best = 0;
            for i in 1..len {
                if smoothed[i] < smoothed[best] {
                    best = i;
                }
            }
            best
        };
        // armed if at some prefix length >= burn_in the newest value was not the minimum
        let armed = (burn_in.max(1)..=n).any(|len| argmin_at(len) != len - 1);
        let a = argmin_at(n);
        let lo = a.saturating_sub(k);
        let hi = (a + k).min(n - 1);
        let mut sum = 0.0;
        for v in &smoothed[lo..=hi] {
            sum += v;
        }
        let min = sum / (hi - lo + 1) as f64;
        if armed && smoothed[n - 1] > pi * min {
            fired.push(t);
            start = t + 1;
        }
    }
    fired
}
