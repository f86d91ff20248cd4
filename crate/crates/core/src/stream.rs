//! Seeded non-stationary classification streams.
//!
//! Clean samples come from a class-conditional Gaussian mixture. Each stream
//! step applies a corruption whose kind and severity follow a
//! [`DomainSchedule`]: a sequence of held segments joined by linear
//! transitions, during which the outputs of the outgoing and incoming
//! corruptions are blended convexly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Batch, LabeledSet};
use crate::seed::rng_for;

/// Largest admissible severity.
pub const MAX_SEVERITY: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    FeatureScale,
    PlaneRotation,
    FeatureMask,
    MeanShift,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::FeatureScale,
        CorruptionKind::PlaneRotation,
        CorruptionKind::FeatureMask,
        CorruptionKind::MeanShift,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::FeatureScale => "feature-scale",
            CorruptionKind::PlaneRotation => "plane-rotation",
            CorruptionKind::FeatureMask => "feature-mask",
            CorruptionKind::MeanShift => "mean-shift",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or_else(|| Error::config(format!("unknown corruption kind `{tag}`")))
    }
}

/// Per-unit-severity constants of every corruption.
///
/// * gaussian-noise: `x + s * noise_sigma * N(0, 1)` per entry
/// * feature-scale: `x * (1 + scale_alpha * s)`
/// * plane-rotation: rotate each coordinate pair `(2i, 2i+1)` by
///   `rotation_per_severity * s` radians
/// * feature-mask: zero the last `round(mask_fraction_per_severity * s * d)`
///   features
/// * mean-shift: `x + s * shift_per_severity * (1, .., 1) / sqrt(d)`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionParams {
    pub noise_sigma: f64,
    pub scale_alpha: f64,
    pub rotation_per_severity: f64,
    pub mask_fraction_per_severity: f64,
    pub shift_per_severity: f64,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.3,
            scale_alpha: 0.3,
            rotation_per_severity: 0.25,
            mask_fraction_per_severity: 0.1,
            shift_per_severity: 0.6,
        }
    }
}

impl CorruptionParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("noise_sigma", self.noise_sigma),
            ("scale_alpha", self.scale_alpha),
            ("rotation_per_severity", self.rotation_per_severity),
            ("mask_fraction_per_severity", self.mask_fraction_per_severity),
            ("shift_per_severity", self.shift_per_severity),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("corruption.{name} must be finite and >= 0")));
            }
        }
        if self.mask_fraction_per_severity * MAX_SEVERITY > 1.0 {
            return Err(Error::config("corruption.mask_fraction_per_severity * 5 must be <= 1"));
        }
        Ok(())
    }
}

/// Apply one corruption at the given severity. Severity 0 returns `x`
/// unchanged and draws nothing from `rng`.
pub fn apply_corruption(
    x: &Matrix,
    kind: CorruptionKind,
    severity: f64,
    params: &CorruptionParams,
    rng: &mut impl Rng,
) -> Result<Matrix> {
    if !(severity.is_finite() && (0.0..=MAX_SEVERITY).contains(&severity)) {
        return Err(Error::config(format!("severity {severity} outside [0, {MAX_SEVERITY}]")));
    }
    if severity == 0.0 {
        return Ok(x.clone());
    }
    let d = x.cols();
    let mut y = x.clone();
    match kind {
        CorruptionKind::GaussianNoise => {
            let s = severity * params.noise_sigma;
            for v in y.as_mut_slice() {
                let e: f64 = StandardNormal.sample(rng);
                *v += s * e;
            }
        }
        CorruptionKind::FeatureScale => {
            let f = 1.0 + params.scale_alpha * severity;
            y.as_mut_slice().iter_mut().for_each(|v| *v *= f);
        }
        CorruptionKind::PlaneRotation => {
            let (s, c) = (params.rotation_per_severity * severity).sin_cos();
            for i in 0..y.rows() {
                let r = y.row_mut(i);
                for p in 0..d / 2 {
                    let (a, b) = (r[2 * p], r[2 * p + 1]);
                    r[2 * p] = c * a - s * b;
                    r[2 * p + 1] = s * a + c * b;
                }
            }
        }
        CorruptionKind::FeatureMask => {
            let m = masked_count(d, severity, params);
            for i in 0..y.rows() {
                y.row_mut(i)[d - m..].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        CorruptionKind::MeanShift => {
            let delta = severity * params.shift_per_severity / (d as f64).sqrt();
            y.as_mut_slice().iter_mut().for_each(|v| *v += delta);
        }
    }
    Ok(y)
}

pub fn masked_count(d: usize, severity: f64, params: &CorruptionParams) -> usize {
    ((params.mask_fraction_per_severity * severity * d as f64).round() as usize).min(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub kind: CorruptionKind,
    pub severity: f64,
    pub hold: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Explicit {
        segments: Vec<SegmentSpec>,
        #[serde(default)]
        transition_steps: u64,
    },
    /// Random kinds (never the same kind twice in a row) with severities
    /// uniform in `[min_severity, max_severity]`.
    Generated {
        num_segments: usize,
        hold_steps: u64,
        transition_steps: u64,
        min_severity: f64,
        max_severity: f64,
    },
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Generated {
            num_segments: 25,
            hold_steps: 1808,
            transition_steps: 200,
            min_severity: 2.0,
            max_severity: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSchedule {
    segments: Vec<SegmentSpec>,
    transitions: Vec<u64>,
    hold_starts: Vec<u64>,
    total_steps: u64,
    seed: u64,
}

/// One active corruption with its blend weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub kind: CorruptionKind,
    pub weight: f64,
    pub severity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blend {
    pub components: Vec<Component>,
}

impl Blend {
    /// Weight-averaged severity; continuous along the schedule.
    pub fn severity(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.severity).sum()
    }

    /// Kind with the largest weight (the outgoing kind on an exact tie).
    pub fn dominant(&self) -> CorruptionKind {
        let mut best = self.components[0];
        for c in &self.components[1..] {
            if c.weight > best.weight {
                best = *c;
            }
        }
        best.kind
    }
}

fn check_severity(s: f64) -> Result<()> {
    if s.is_finite() && (0.0..=MAX_SEVERITY).contains(&s) {
        Ok(())
    } else {
        Err(Error::config(format!("segment severity {s} outside [0, {MAX_SEVERITY}]")))
    }
}

pub fn build_schedule(config: &ScheduleConfig, seed: u64) -> Result<DomainSchedule> {
    let (segments, transition) = match config {
        ScheduleConfig::Explicit {
            segments,
            transition_steps,
        } => (segments.clone(), *transition_steps),
        ScheduleConfig::Generated {
            num_segments,
            hold_steps,
            transition_steps,
            min_severity,
            max_severity,
        } => {
            check_severity(*min_severity)?;
            check_severity(*max_severity)?;
            if min_severity > max_severity {
                return Err(Error::config("schedule.min_severity exceeds max_severity"));
            }
            let mut rng = rng_for(seed, "schedule");
            let mut segs: Vec<SegmentSpec> = Vec::with_capacity(*num_segments);
            for _ in 0..*num_segments {
                let kind = loop {
                    let k = CorruptionKind::ALL[rng.random_range(0..CorruptionKind::ALL.len())];
                    if segs.last().is_none_or(|s| s.kind != k) {
                        break k;
                    }
                };
                let severity = if max_severity > min_severity {
                    rng.random_range(*min_severity..=*max_severity)
                } else {
                    *min_severity
                };
                segs.push(SegmentSpec {
                    kind,
                    severity,
                    hold: *hold_steps,
                });
            }
            (segs, *transition_steps)
        }
    };
    if segments.is_empty() {
        return Err(Error::config("schedule needs at least one segment"));
    }
    let mut hold_starts = Vec::with_capacity(segments.len());
    let mut t = 0u64;
    for (i, s) in segments.iter().enumerate() {
        if s.hold == 0 {
            return Err(Error::config(format!("schedule segment {i} has zero length")));
        }
        check_severity(s.severity)?;
        hold_starts.push(t);
        t += s.hold;
        if i + 1 < segments.len() {
            t += transition;
        }
    }
    Ok(DomainSchedule {
        transitions: vec![transition; segments.len() - 1],
        segments,
        hold_starts,
        total_steps: t,
        seed,
    })
}

impl DomainSchedule {
    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn segments(&self) -> &[SegmentSpec] {
        &self.segments
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Largest severity change between consecutive steps.
    pub fn max_slope(&self) -> f64 {
        self.segments
            .windows(2)
            .zip(&self.transitions)
            .map(|(w, &tr)| {
                let d = (w[1].severity - w[0].severity).abs();
                if tr == 0 {
                    d
                } else {
                    d / tr as f64
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn severity_at(&self, t: u64) -> Result<Blend> {
        if t >= self.total_steps {
            return Err(Error::Range {
                t,
                total: self.total_steps,
            });
        }
        let i = self.hold_starts.partition_point(|&s| s <= t) - 1;
        let seg = &self.segments[i];
        let offset = t - self.hold_starts[i];
        if offset < seg.hold {
            return Ok(Blend {
                components: vec![Component {
                    kind: seg.kind,
                    weight: 1.0,
                    severity: seg.severity,
                }],
            });
        }
        // inside the transition towards segment i + 1
        let next = &self.segments[i + 1];
        let u = (offset - seg.hold) as f64 / self.transitions[i] as f64;
        Ok(Blend {
            components: vec![
                Component {
                    kind: seg.kind,
                    weight: 1.0 - u,
                    severity: seg.severity,
                },
                Component {
                    kind: next.kind,
                    weight: u,
                    severity: next.severity,
                },
            ],
        })
    }
}

/// Class-conditional Gaussian mixture: isotropic `noise_std` around class
/// means of norm `separation` in random directions, uniform class prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub separation: f64,
    pub noise_std: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            separation: 3.0,
            noise_std: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SourceDistribution {
    means: Matrix,
    noise_std: f64,
}

impl SourceDistribution {
    pub fn new(input_dim: usize, num_classes: usize, task: &TaskConfig, seed: u64) -> Result<Self> {
        if !(task.separation.is_finite() && task.separation >= 0.0) {
            return Err(Error::config("task.separation must be finite and >= 0"));
        }
        if !(task.noise_std.is_finite() && task.noise_std > 0.0) {
            return Err(Error::config("task.noise_std must be > 0"));
        }
        let mut rng = rng_for(seed, "task-means");
        let mut means = Matrix::zeros(num_classes, input_dim);
        for k in 0..num_classes {
            let r = means.row_mut(k);
            for v in r.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter_mut().for_each(|v| *v *= task.separation / n);
        }
        Ok(Self {
            means,
            noise_std: task.noise_std,
        })
    }

    /// Explicit class means (rows), for tests and custom tasks.
    pub fn with_means(means: Matrix, noise_std: f64) -> Self {
        Self { means, noise_std }
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.means.cols()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> (Matrix, Vec<usize>) {
        let d = self.input_dim();
        let mut x = Matrix::zeros(n, d);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = rng.random_range(0..self.num_classes());
            let r = x.row_mut(i);
            for (j, v) in r.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(rng);
                *v = self.means.get(label, j) + self.noise_std * e;
            }
            y.push(label);
        }
        (x, y)
    }

    /// Clean labeled set for source training.
    pub fn labeled_set(&self, n: usize, seed: u64) -> LabeledSet {
        let mut rng = rng_for(seed, "source-data");
        let (features, labels) = self.sample(n, &mut rng);
        LabeledSet { features, labels }
    }
}

/// Cursor over a schedule; advancing it is the only mutation.
#[derive(Clone, Debug)]
pub struct StreamState {
    schedule: DomainSchedule,
    cursor: u64,
    rng: ChaCha8Rng,
    source: SourceDistribution,
    params: CorruptionParams,
}

impl StreamState {
    pub fn new(
        schedule: DomainSchedule,
        source: SourceDistribution,
        params: CorruptionParams,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            schedule,
            cursor: 0,
            rng: rng_for(seed, "stream"),
            source,
            params,
        })
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn schedule(&self) -> &DomainSchedule {
        &self.schedule
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor >= self.schedule.total_steps
    }

    /// Next batch with its evaluation-only labels, or `None` once the
    /// schedule is exhausted.
    pub fn sample_batch(&mut self, batch_size: usize) -> Result<Option<(Batch, Blend)>> {
        if self.is_exhausted() {
            return Ok(None);
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        let blend = self.schedule.severity_at(self.cursor)?;
        let (clean, labels) = self.source.sample(batch_size, &mut self.rng);
        let features = if let [only] = blend.components.as_slice() {
            apply_corruption(&clean, only.kind, only.severity, &self.params, &mut self.rng)?
        } else {
            let mut acc = Matrix::zeros(clean.rows(), clean.cols());
            for c in blend.components.iter().filter(|c| c.weight > 0.0) {
                let y = apply_corruption(&clean, c.kind, c.severity, &self.params, &mut self.rng)?;
                for (a, v) in acc.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *a += c.weight * v;
                }
            }
            acc
        };
        let batch = Batch {
            features,
            labels: Some(labels),
            step_index: self.cursor,
        };
        self.cursor += 1;
        Ok(Some((batch, blend)))
    }
}
