//! Minimal differentiable classifier: dense layers, per-feature normalization
//! with running statistics, ReLU and a softmax head.
//!
//! Parameters live in one flat vector. For every hidden layer the layout is
//! `W (out x in, row-major) | b (out) | [scale (out) | shift (out)]`, followed
//! by the output layer `W (K x h) | b (K)`. Normalization running statistics
//! are not parameters; they are held per normalization layer in [`NormStats`].
//!
//! A normalization layer normalizes either with the statistics of the current
//! batch ([`StatsMode::Batch`], used for source training) or with the stored
//! running statistics ([`StatsMode::Running`], used at test time). In running
//! mode the statistics are constants with respect to the gradient.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::rng_for;

/// Variance floor added inside the square root of every normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Momentum used when running statistics follow test batches.
pub const DEFAULT_STATS_MOMENTUM: f64 = 0.1;
/// Probabilities below this are clamped before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;
const VAR_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    pub norm_after_hidden: Vec<bool>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_widths: vec![32],
            num_classes: 5,
            norm_after_hidden: vec![true],
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("architecture.input_dim must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("architecture.num_classes must be >= 2"));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("architecture.hidden_widths entries must be >= 1"));
        }
        if self.norm_after_hidden.len() != self.hidden_widths.len() {
            return Err(Error::config(format!(
                "architecture.norm_after_hidden has {} entries for {} hidden layers",
                self.norm_after_hidden.len(),
                self.hidden_widths.len()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }

    /// Descriptor written into checkpoints:
    /// `[input_dim, K, n_hidden, widths.., norm flags (0/1)..]`.
    pub fn descriptor(&self) -> Vec<u32> {
        let mut d = vec![
            self.input_dim as u32,
            self.num_classes as u32,
            self.hidden_widths.len() as u32,
        ];
        d.extend(self.hidden_widths.iter().map(|&w| w as u32));
        d.extend(self.norm_after_hidden.iter().map(|&f| u32::from(f)));
        d
    }

    pub fn from_descriptor(d: &[u32]) -> Result<Self> {
        if d.len() < 3 {
            return Err(Error::Format("architecture descriptor too short".into()));
        }
        let n = d[2] as usize;
        if d.len() != 3 + 2 * n {
            return Err(Error::Format(format!(
                "architecture descriptor has {} fields, expected {}",
                d.len(),
                3 + 2 * n
            )));
        }
        let arch = Self {
            input_dim: d[0] as usize,
            num_classes: d[1] as usize,
            hidden_widths: d[3..3 + n].iter().map(|&w| w as usize).collect(),
            norm_after_hidden: d[3 + n..].iter().map(|&f| f != 0).collect(),
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug)]
struct DenseSlot {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

impl DenseSlot {
    fn w_range(&self) -> Range<usize> {
        self.w..self.w + self.inp * self.out
    }
    fn b_range(&self) -> Range<usize> {
        self.b..self.b + self.out
    }
}

#[derive(Clone, Debug)]
struct NormSlot {
    scale: usize,
    shift: usize,
    width: usize,
    stats: usize,
}

impl NormSlot {
    fn scale_range(&self) -> Range<usize> {
        self.scale..self.scale + self.width
    }
    fn shift_range(&self) -> Range<usize> {
        self.shift..self.shift + self.width
    }
}

#[derive(Clone, Debug)]
struct HiddenSlot {
    dense: DenseSlot,
    norm: Option<NormSlot>,
}

/// Offsets of every parameter block inside the flat vector.
#[derive(Clone, Debug)]
pub struct Layout {
    hidden: Vec<HiddenSlot>,
    output: DenseSlot,
    total: usize,
}

/// Kind of a parameter block, for inspection and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    DenseWeight,
    DenseBias,
    NormScale,
    NormShift,
}

#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub layer: usize,
    pub kind: BlockKind,
    pub range: Range<usize>,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut off = 0;
        let mut inp = arch.input_dim;
        let mut hidden = Vec::with_capacity(arch.hidden_widths.len());
        let mut n_norm = 0;
        for (i, &out) in arch.hidden_widths.iter().enumerate() {
            let dense = DenseSlot {
                w: off,
                b: off + inp * out,
                inp,
                out,
            };
            off += inp * out + out;
            let norm = if arch.norm_after_hidden.get(i).copied().unwrap_or(false) {
                let slot = NormSlot {
                    scale: off,
                    shift: off + out,
                    width: out,
                    stats: n_norm,
                };
                n_norm += 1;
                off += 2 * out;
                Some(slot)
            } else {
                None
            };
            hidden.push(HiddenSlot { dense, norm });
            inp = out;
        }
        let output = DenseSlot {
            w: off,
            b: off + inp * arch.num_classes,
            inp,
            out: arch.num_classes,
        };
        off += inp * arch.num_classes + arch.num_classes;
        Self {
            hidden,
            output,
            total: off,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn norm_widths(&self) -> Vec<usize> {
        self.hidden
            .iter()
            .filter_map(|h| h.norm.as_ref().map(|n| n.width))
            .collect()
    }

    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut v = Vec::new();
        for (layer, h) in self.hidden.iter().enumerate() {
            v.push(ParamBlock {
                layer,
                kind: BlockKind::DenseWeight,
                range: h.dense.w_range(),
            });
            v.push(ParamBlock {
                layer,
                kind: BlockKind::DenseBias,
                range: h.dense.b_range(),
            });
            if let Some(n) = &h.norm {
                v.push(ParamBlock {
                    layer,
                    kind: BlockKind::NormScale,
                    range: n.scale_range(),
                });
                v.push(ParamBlock {
                    layer,
                    kind: BlockKind::NormShift,
                    range: n.shift_range(),
                });
            }
        }
        let layer = self.hidden.len();
        v.push(ParamBlock {
            layer,
            kind: BlockKind::DenseWeight,
            range: self.output.w_range(),
        });
        v.push(ParamBlock {
            layer,
            kind: BlockKind::DenseBias,
            range: self.output.b_range(),
        });
        v
    }
}

/// Which parameters an optimizer step may touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableMask(Vec<bool>);

impl TrainableMask {
    pub fn all(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn none(len: usize) -> Self {
        Self(vec![false; len])
    }

    /// Normalization scale and shift entries only.
    pub fn norm_affine(layout: &Layout) -> Self {
        let mut m = vec![false; layout.total];
        for b in layout.blocks() {
            if matches!(b.kind, BlockKind::NormScale | BlockKind::NormShift) {
                m[b.range].iter_mut().for_each(|x| *x = true);
            }
        }
        Self(m)
    }

    pub fn from_vec(v: Vec<bool>) -> Self {
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn any_in(&self, r: Range<usize>) -> bool {
        self.0[r].iter().any(|&b| b)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsMode {
    /// Normalize with the statistics of the batch being processed.
    Batch,
    /// Normalize with the stored running statistics.
    Running,
}

/// Softmax output for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbOutput {
    pub probs: Matrix,
    pub predicted: Vec<usize>,
    pub confidence: Vec<f64>,
}

impl ProbOutput {
    /// Row-wise softmax with max subtraction.
    pub fn from_logits(logits: &Matrix) -> Self {
        let (n, k) = (logits.rows(), logits.cols());
        let mut probs = Matrix::zeros(n, k);
        let mut predicted = Vec::with_capacity(n);
        let mut confidence = Vec::with_capacity(n);
        for i in 0..n {
            let z = logits.row(i);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = probs.row_mut(i);
            let mut s = 0.0;
            for (pj, &zj) in p.iter_mut().zip(z) {
                *pj = (zj - m).exp();
                s += *pj;
            }
            let mut best = 0;
            for j in 0..k {
                p[j] /= s;
                if p[j] > p[best] {
                    best = j;
                }
            }
            predicted.push(best);
            confidence.push(p[best]);
        }
        Self {
            probs,
            predicted,
            confidence,
        }
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    /// Shannon entropy of every row, with clamped logarithms.
    pub fn entropies(&self) -> Vec<f64> {
        self.probs.iter_rows().map(entropy).collect()
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&q| q * q.max(LOG_CLAMP).ln()).sum::<f64>()
}

/// Features plus evaluation-only labels for one stream step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub step_index: u64,
}

impl Batch {
    pub fn unlabeled(features: Matrix, step_index: u64) -> Self {
        Self {
            features,
            labels: None,
            step_index,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Labeled sample set for source training.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

struct HiddenCache {
    input: Matrix,
    xhat: Option<Matrix>,
    inv_std: Vec<f64>,
    act_in: Matrix,
}

struct ForwardCache {
    hidden: Vec<HiddenCache>,
    last: Matrix,
    logits: Matrix,
}

enum StatsUse<'a> {
    Batch(Option<(&'a mut [NormStats], f64)>),
    Running(&'a [NormStats]),
    RunningUpdate(&'a mut [NormStats], f64),
}

fn column_moments(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (z.rows(), z.cols());
    let mut mean = vec![0.0; c];
    for r in z.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for r in z.iter_rows() {
        for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    (mean, var)
}

fn blend_stats(stats: &mut NormStats, mean: &[f64], biased_var: &[f64], n: usize, momentum: f64) {
    let corr = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
    for j in 0..mean.len() {
        stats.mean[j] = (1.0 - momentum) * stats.mean[j] + momentum * mean[j];
        let v = (1.0 - momentum) * stats.var[j] + momentum * biased_var[j] * corr;
        stats.var[j] = v.max(VAR_FLOOR);
    }
}

/// `out = x W^T + b` for a row-major `W (out x in)`.
fn dense(x: &Matrix, w: &[f64], b: &[f64], out: usize) -> Matrix {
    let inp = x.cols();
    let mut y = Matrix::zeros(x.rows(), out);
    for i in 0..x.rows() {
        let xi = x.row(i);
        let yi = y.row_mut(i);
        for o in 0..out {
            let wo = &w[o * inp..(o + 1) * inp];
            let mut s = b[o];
            for (a, c) in wo.iter().zip(xi) {
                s += a * c;
            }
            yi[o] = s;
        }
    }
    y
}

#[derive(Clone, Debug)]
pub struct ModelState {
    arch: Architecture,
    layout: Layout,
    theta: Vec<f64>,
    theta_pre: Vec<f64>,
    stats: Vec<NormStats>,
    source_stats: Vec<NormStats>,
    mode: StatsMode,
}

impl ModelState {
    /// Fresh model: weights and biases uniform in `±1/sqrt(fan_in)`, drawn in
    /// binary32 precision; scale 1, shift 0; statistics mean 0, variance 1.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(arch);
        let mut rng = rng_for(seed, "model-init");
        let mut theta = vec![0.0; layout.total];
        let mut fill_dense = |slot: &DenseSlot, theta: &mut [f64]| {
            let bound = 1.0 / (slot.inp as f32).sqrt();
            for i in slot.w_range().chain(slot.b_range()) {
                theta[i] = f64::from(rng.random_range(-bound..bound));
            }
        };
        for h in &layout.hidden {
            fill_dense(&h.dense, &mut theta);
            if let Some(n) = &h.norm {
                theta[n.scale_range()].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        fill_dense(&layout.output, &mut theta);
        let stats: Vec<NormStats> = layout
            .norm_widths()
            .into_iter()
            .map(NormStats::identity)
            .collect();
        Ok(Self {
            arch: arch.clone(),
            theta_pre: theta.clone(),
            theta,
            source_stats: stats.clone(),
            stats,
            layout,
            mode: StatsMode::Running,
        })
    }

    /// Rebuild a model from stored parts, checking every length.
    pub fn from_parts(
        arch: Architecture,
        theta: Vec<f64>,
        theta_pre: Vec<f64>,
        stats: Vec<NormStats>,
        source_stats: Vec<NormStats>,
    ) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if theta.len() != layout.total || theta_pre.len() != layout.total {
            return Err(Error::shape(
                format!("{} parameters", layout.total),
                format!("theta {} / theta_pre {}", theta.len(), theta_pre.len()),
            ));
        }
        let widths = layout.norm_widths();
        for s in [&stats, &source_stats] {
            let ok = s.len() == widths.len()
                && s.iter()
                    .zip(&widths)
                    .all(|(st, &w)| st.mean.len() == w && st.var.len() == w);
            if !ok {
                return Err(Error::shape(format!("norm widths {widths:?}"), "mismatched statistics"));
            }
            if s.iter().flat_map(|st| &st.var).any(|&v| !(v > 0.0)) {
                return Err(Error::Format("running variance must be positive".into()));
            }
        }
        Ok(Self {
            arch,
            layout,
            theta,
            theta_pre,
            stats,
            source_stats,
            mode: StatsMode::Running,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_pre(&self) -> &[f64] {
        &self.theta_pre
    }

    pub fn stats(&self) -> &[NormStats] {
        &self.stats
    }

    pub fn source_stats(&self) -> &[NormStats] {
        &self.source_stats
    }

    pub fn mode(&self) -> StatsMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: StatsMode) {
        self.mode = mode;
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Overwrite the current parameters (never the source snapshot).
    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.layout.total {
            return Err(Error::shape(self.layout.total, theta.len()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite parameter vector"));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn set_stats(&mut self, stats: Vec<NormStats>) -> Result<()> {
        let widths = self.layout.norm_widths();
        let ok = stats.len() == widths.len()
            && stats.iter().zip(&widths).all(|(s, &w)| s.mean.len() == w && s.var.len() == w)
            && stats.iter().flat_map(|s| &s.var).all(|&v| v > 0.0);
        if !ok {
            return Err(Error::shape(format!("norm widths {widths:?}"), "invalid statistics"));
        }
        self.stats = stats;
        Ok(())
    }

    pub fn restore_source_stats(&mut self) {
        self.stats.clone_from(&self.source_stats);
    }

    /// Full reset: parameters and statistics back to the source snapshot.
    pub fn restore_source(&mut self) {
        self.theta.clone_from(&self.theta_pre);
        self.restore_source_stats();
    }

    /// Make the current parameters and statistics the frozen source snapshot.
    fn freeze_source(&mut self) {
        self.theta_pre.clone_from(&self.theta);
        self.source_stats.clone_from(&self.stats);
    }

    /// Round every stored value to binary32 precision (checkpoint precision).
    pub fn snap_to_f32(&mut self) {
        let snap = |v: &mut f64| *v = f64::from(*v as f32);
        self.theta.iter_mut().for_each(snap);
        self.theta_pre.iter_mut().for_each(snap);
        for s in self.stats.iter_mut().chain(self.source_stats.iter_mut()) {
            s.mean.iter_mut().for_each(snap);
            s.var.iter_mut().for_each(|v| *v = f64::from((*v as f32).max(f32::MIN_POSITIVE)));
        }
    }

    pub fn weight_l2_norm(&self) -> f64 {
        l2_norm(&self.theta)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::shape(
                format!("{} features", self.arch.input_dim),
                format!("{} features", x.cols()),
            ));
        }
        if !x.is_finite() {
            return Err(Error::Input("non-finite feature value".into()));
        }
        Ok(())
    }

    fn run_forward(&self, x: &Matrix, mut stats: StatsUse<'_>, keep: bool) -> ForwardCache {
        let n = x.rows();
        let mut hidden = Vec::new();
        let mut cur = x.clone();
        for h in &self.layout.hidden {
            let d = &h.dense;
            let z = dense(&cur, &self.theta[d.w_range()], &self.theta[d.b_range()], d.out);
            let (act_in, xhat, inv_std) = match &h.norm {
                None => (z, None, Vec::new()),
                Some(ns) => {
                    let (mean, inv_std) = match &mut stats {
                        StatsUse::Batch(upd) => {
                            let (m, v) = column_moments(&z);
                            if let Some((st, mom)) = upd {
                                blend_stats(&mut st[ns.stats], &m, &v, n, *mom);
                            }
                            let inv: Vec<f64> = v.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                            (m, inv)
                        }
                        StatsUse::Running(st) => {
                            let s = &st[ns.stats];
                            (s.mean.clone(), s.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect())
                        }
                        StatsUse::RunningUpdate(st, mom) => {
                            let (m, v) = column_moments(&z);
                            blend_stats(&mut st[ns.stats], &m, &v, n, *mom);
                            let s = &st[ns.stats];
                            (s.mean.clone(), s.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect())
                        }
                    };
                    let scale = &self.theta[ns.scale_range()];
                    let shift = &self.theta[ns.shift_range()];
                    let mut xh = z;
                    let mut a = Matrix::zeros(n, d.out);
                    for i in 0..n {
                        let xr = xh.row_mut(i);
                        let ar = a.row_mut(i);
                        for j in 0..d.out {
                            xr[j] = (xr[j] - mean[j]) * inv_std[j];
                            ar[j] = scale[j] * xr[j] + shift[j];
                        }
                    }
                    (a, Some(xh), inv_std)
                }
            };
            let mut out = act_in.clone();
            out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            if keep {
                hidden.push(HiddenCache {
                    input: std::mem::replace(&mut cur, out),
                    xhat,
                    inv_std,
                    act_in,
                });
            } else {
                cur = out;
            }
        }
        let o = &self.layout.output;
        let logits = dense(&cur, &self.theta[o.w_range()], &self.theta[o.b_range()], o.out);
        ForwardCache {
            hidden,
            last: cur,
            logits,
        }
    }

    /// Pure forward pass; statistics are never touched.
    pub fn predict(&self, x: &Matrix) -> Result<ProbOutput> {
        self.check_input(x)?;
        if x.rows() == 0 {
            return Err(Error::Degenerate("empty batch".into()));
        }
        let use_ = match self.mode {
            StatsMode::Batch => StatsUse::Batch(None),
            StatsMode::Running => StatsUse::Running(&self.stats),
        };
        let c = self.run_forward(x, use_, false);
        checked_probs(&c.logits)
    }

    /// Forward pass that optionally folds the batch statistics into the
    /// running statistics with [`DEFAULT_STATS_MOMENTUM`].
    pub fn forward(&mut self, batch: &Batch, update_stats: bool) -> Result<ProbOutput> {
        if update_stats {
            self.forward_with_momentum(&batch.features, DEFAULT_STATS_MOMENTUM)
        } else {
            self.predict(&batch.features)
        }
    }

    /// Forward pass updating running statistics with the given momentum.
    ///
    /// In running mode each layer's statistics are updated before that layer
    /// normalizes, so the returned output already reflects the new
    /// statistics. A momentum of 1 replaces them with the batch statistics.
    pub fn forward_with_momentum(&mut self, x: &Matrix, momentum: f64) -> Result<ProbOutput> {
        self.check_input(x)?;
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config(format!("statistics momentum {momentum} outside [0, 1]")));
        }
        if x.rows() < 2 {
            return Err(Error::Degenerate("statistics update needs at least 2 samples".into()));
        }
        let mut stats = self.stats.clone();
        let use_ = match self.mode {
            StatsMode::Batch => StatsUse::Batch(Some((&mut stats, momentum))),
            StatsMode::Running => StatsUse::RunningUpdate(&mut stats, momentum),
        };
        let c = self.run_forward(x, use_, false);
        self.stats = stats;
        checked_probs(&c.logits)
    }

    /// Mean Shannon entropy of the predictions and its exact gradient,
    /// zeroed outside `mask`.
    pub fn entropy_and_grad(&self, x: &Matrix, mask: &TrainableMask) -> Result<(f64, Vec<f64>)> {
        let w = vec![1.0; x.rows()];
        self.weighted_entropy_and_grad(x, &w, mask)
    }

    /// `sum_i w_i H_i / n` and its gradient. Zero weights drop a sample.
    pub fn weighted_entropy_and_grad(
        &self,
        x: &Matrix,
        weights: &[f64],
        mask: &TrainableMask,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        let n = x.rows();
        if n == 0 {
            return Err(Error::Degenerate("empty batch".into()));
        }
        if weights.len() != n {
            return Err(Error::shape(n, weights.len()));
        }
        self.check_mask(mask)?;
        let cache = self.forward_for_grad(x);
        let out = checked_probs(&cache.logits)?;
        let k = self.arch.num_classes;
        let mut dlogits = Matrix::zeros(n, k);
        let mut loss = 0.0;
        for i in 0..n {
            let p = out.probs.row(i);
            // exact derivative of -sum p ln(max(p, c)): dH/dz_k = -p_k (a_k - sum_j p_j a_j)
            let a: Vec<f64> = p
                .iter()
                .map(|&q| q.max(LOG_CLAMP).ln() + if q > LOG_CLAMP { 1.0 } else { 0.0 })
                .collect();
            let abar: f64 = p.iter().zip(&a).map(|(q, a)| q * a).sum();
            loss += weights[i] * entropy(p);
            let scale = weights[i] / n as f64;
            let d = dlogits.row_mut(i);
            for j in 0..k {
                d[j] = -scale * p[j] * (a[j] - abar);
            }
        }
        let loss = loss / n as f64;
        if !loss.is_finite() {
            return Err(Error::numeric("non-finite entropy loss"));
        }
        Ok((loss, self.backward(&cache, &dlogits, mask)))
    }

    /// Mean cross-entropy against `labels` and its exact gradient.
    pub fn cross_entropy_and_grad(
        &self,
        x: &Matrix,
        labels: &[usize],
        mask: &TrainableMask,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        let n = x.rows();
        if n == 0 {
            return Err(Error::Degenerate("empty batch".into()));
        }
        if labels.len() != n {
            return Err(Error::shape(n, labels.len()));
        }
        let k = self.arch.num_classes;
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        self.check_mask(mask)?;
        let cache = self.forward_for_grad(x);
        let out = checked_probs(&cache.logits)?;
        let mut dlogits = Matrix::zeros(n, k);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let p = out.probs.row(i);
            loss -= p[y].max(LOG_CLAMP).ln();
            let d = dlogits.row_mut(i);
            if p[y] > LOG_CLAMP {
                for j in 0..k {
                    d[j] = (p[j] - if j == y { 1.0 } else { 0.0 }) / n as f64;
                }
            }
        }
        Ok((loss / n as f64, self.backward(&cache, &dlogits, mask)))
    }

    fn check_mask(&self, mask: &TrainableMask) -> Result<()> {
        if mask.len() != self.layout.total {
            return Err(Error::shape(
                format!("mask of {}", self.layout.total),
                format!("mask of {}", mask.len()),
            ));
        }
        Ok(())
    }

    fn forward_for_grad(&self, x: &Matrix) -> ForwardCache {
        let use_ = match self.mode {
            StatsMode::Batch => StatsUse::Batch(None),
            StatsMode::Running => StatsUse::Running(&self.stats),
        };
        self.run_forward(x, use_, true)
    }

    fn backward(&self, cache: &ForwardCache, dlogits: &Matrix, mask: &TrainableMask) -> Vec<f64> {
        let mut grad = vec![0.0; self.layout.total];
        let n = dlogits.rows();
        let o = &self.layout.output;
        if mask.any_in(o.w.min(o.b)..o.b + o.out) {
            for i in 0..n {
                let d = dlogits.row(i);
                let h = cache.last.row(i);
                for k in 0..o.out {
                    let gw = &mut grad[o.w + k * o.inp..o.w + (k + 1) * o.inp];
                    for (g, &hv) in gw.iter_mut().zip(h) {
                        *g += d[k] * hv;
                    }
                    grad[o.b + k] += d[k];
                }
            }
        }
        // lowest hidden layer that owns a trainable entry; nothing below it needs gradients
        let lowest = self.layout.hidden.iter().position(|h| {
            mask.any_in(h.dense.w..h.dense.b + h.dense.out)
                || h.norm
                    .as_ref()
                    .is_some_and(|ns| mask.any_in(ns.scale..ns.shift + ns.width))
        });
        let Some(lowest) = lowest else {
            return finish_grad(grad, mask);
        };
        // gradient w.r.t. the output of the last hidden layer
        let mut dh = Matrix::zeros(n, o.inp);
        let wout = &self.theta[o.w_range()];
        for i in 0..n {
            let d = dlogits.row(i);
            let r = dh.row_mut(i);
            for k in 0..o.out {
                let wk = &wout[k * o.inp..(k + 1) * o.inp];
                for (rv, &w) in r.iter_mut().zip(wk) {
                    *rv += d[k] * w;
                }
            }
        }
        for li in (lowest..self.layout.hidden.len()).rev() {
            let h = &self.layout.hidden[li];
            let c = &cache.hidden[li];
            let width = h.dense.out;
            // through ReLU
            let mut dact = dh;
            for (dv, &a) in dact.as_mut_slice().iter_mut().zip(c.act_in.as_slice()) {
                if a <= 0.0 {
                    *dv = 0.0;
                }
            }
            let dz = match (&h.norm, &c.xhat) {
                (Some(ns), Some(xhat)) => {
                    let scale = &self.theta[ns.scale_range()];
                    let mut dxhat = Matrix::zeros(n, width);
                    for i in 0..n {
                        let da = dact.row(i);
                        let xr = xhat.row(i);
                        let dx = dxhat.row_mut(i);
                        for j in 0..width {
                            grad[ns.scale + j] += da[j] * xr[j];
                            grad[ns.shift + j] += da[j];
                            dx[j] = da[j] * scale[j];
                        }
                    }
                    if li == lowest && !mask.any_in(h.dense.w..h.dense.b + h.dense.out) {
                        break;
                    }
                    match self.mode {
                        StatsMode::Running => {
                            for i in 0..n {
                                let r = dxhat.row_mut(i);
                                for j in 0..width {
                                    r[j] *= c.inv_std[j];
                                }
                            }
                            dxhat
                        }
                        StatsMode::Batch => {
                            let mut sum_d = vec![0.0; width];
                            let mut sum_dx = vec![0.0; width];
                            for i in 0..n {
                                let dx = dxhat.row(i);
                                let xr = xhat.row(i);
                                for j in 0..width {
                                    sum_d[j] += dx[j];
                                    sum_dx[j] += dx[j] * xr[j];
                                }
                            }
                            let nf = n as f64;
                            let mut dz = Matrix::zeros(n, width);
                            for i in 0..n {
                                let dx = dxhat.row(i);
                                let xr = xhat.row(i);
                                let r = dz.row_mut(i);
                                for j in 0..width {
                                    r[j] = c.inv_std[j] / nf * (nf * dx[j] - sum_d[j] - xr[j] * sum_dx[j]);
                                }
                            }
                            dz
                        }
                    }
                }
                _ => dact,
            };
            let d = &h.dense;
            for i in 0..n {
                let dzr = dz.row(i);
                let xin = c.input.row(i);
                for oi in 0..d.out {
                    let g = dzr[oi];
                    if g == 0.0 {
                        continue;
                    }
                    let gw = &mut grad[d.w + oi * d.inp..d.w + (oi + 1) * d.inp];
                    for (gv, &xv) in gw.iter_mut().zip(xin) {
                        *gv += g * xv;
                    }
                    grad[d.b + oi] += g;
                }
            }
            if li == lowest {
                break;
            }
            let w = &self.theta[d.w_range()];
            let mut dprev = Matrix::zeros(n, d.inp);
            for i in 0..n {
                let dzr = dz.row(i);
                let r = dprev.row_mut(i);
                for oi in 0..d.out {
                    let g = dzr[oi];
                    if g == 0.0 {
                        continue;
                    }
                    for (rv, &wv) in r.iter_mut().zip(&w[oi * d.inp..(oi + 1) * d.inp]) {
                        *rv += g * wv;
                    }
                }
            }
            dh = dprev;
        }
        finish_grad(grad, mask)
    }

    /// `theta <- theta - lr * grad`; the source snapshot is untouched.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.layout.total {
            return Err(Error::shape(self.layout.total, grad.len()));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate {lr} must be finite and >= 0")));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("non-finite gradient"));
        }
        if lr == 0.0 {
            return Ok(());
        }
        let next: Vec<f64> = self.theta.iter().zip(grad).map(|(t, g)| t - lr * g).collect();
        if next.iter().any(|t| !t.is_finite()) {
            return Err(Error::numeric("parameter update overflowed"));
        }
        self.theta = next;
        Ok(())
    }
}

fn finish_grad(mut grad: Vec<f64>, mask: &TrainableMask) -> Vec<f64> {
    for (g, &m) in grad.iter_mut().zip(mask.as_slice()) {
        if !m {
            *g = 0.0;
        }
    }
    grad
}

fn checked_probs(logits: &Matrix) -> Result<ProbOutput> {
    if !logits.is_finite() {
        return Err(Error::numeric("non-finite logits"));
    }
    Ok(ProbOutput::from_logits(logits))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Source-training recipe: minibatch SGD on cross-entropy with a single
/// ×0.1 learning-rate decay at two thirds of the epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTraining {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for SourceTraining {
    fn default() -> Self {
        Self {
            samples: 4000,
            epochs: 12,
            batch_size: 64,
            lr: 0.05,
        }
    }
}

impl SourceTraining {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("source.samples must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("source.batch_size must be >= 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("source.lr must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedSource {
    pub model: ModelState,
    pub clean_accuracy: f64,
}

/// Train on clean labeled data and freeze the result as the source snapshot.
///
/// After the last epoch the running statistics are set to the population
/// statistics of the training data and everything is rounded to binary32,
/// so the returned model round-trips through a checkpoint exactly.
pub fn train_source(
    arch: &Architecture,
    data: &LabeledSet,
    recipe: &SourceTraining,
    seed: u64,
) -> Result<TrainedSource> {
    recipe.validate()?;
    let n = data.labels.len();
    if n == 0 || data.features.rows() != n {
        return Err(Error::Degenerate("source data is empty or mislabeled".into()));
    }
    let mut model = ModelState::init(arch, seed)?;
    model.check_input(&data.features)?;
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= arch.num_classes) {
        return Err(Error::Input(format!("source label {bad} out of range")));
    }
    if recipe.epochs == 0 {
        let clean_accuracy = accuracy(&model.predict(&data.features)?.predicted, &data.labels);
        return Ok(TrainedSource {
            model,
            clean_accuracy,
        });
    }
    let mask = TrainableMask::all(model.param_count());
    let mut rng = rng_for(seed, "source-shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let decay_at = (2 * recipe.epochs) / 3;
    let mut step = 0u64;
    model.set_mode(StatsMode::Batch);
    for epoch in 0..recipe.epochs {
        let lr = if epoch >= decay_at { recipe.lr * 0.1 } else { recipe.lr };
        // Fisher-Yates with the seeded generator
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(recipe.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = data.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, grad) = model.cross_entropy_and_grad(&x, &y, &mask)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    step,
                    msg: format!("loss {loss}"),
                });
            }
            model.sgd_step(&grad, lr)?;
            // running statistics track the training batches
            model.forward_with_momentum(&x, DEFAULT_STATS_MOMENTUM)?;
            step += 1;
        }
    }
    model.set_mode(StatsMode::Running);
    if n >= 2 {
        model.forward_with_momentum(&data.features, 1.0)?;
    }
    model.snap_to_f32();
    model.freeze_source();
    let clean_accuracy = accuracy(&model.predict(&data.features)?.predicted, &data.labels);
    Ok(TrainedSource {
        model,
        clean_accuracy,
    })
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / pred.len() as f64
}
