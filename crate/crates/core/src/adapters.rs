//! Test-time adaptation methods.
//!
//! Every step returns the predictions of the model before and after the
//! update on the same batch. `preds_before` is always taken before both the
//! statistics update and the gradient step, so the flip score sees the whole
//! effect of one adaptation step. Adapters only ever see features; labels
//! stay with the evaluation path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{entropy, ModelState, ProbOutput, TrainableMask, DEFAULT_STATS_MOMENTUM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    NormAffineOnly,
    AllParameters,
}

impl MaskPolicy {
    pub fn build(self, model: &ModelState) -> TrainableMask {
        match self {
            MaskPolicy::NormAffineOnly => TrainableMask::norm_affine(model.layout()),
            MaskPolicy::AllParameters => TrainableMask::all(model.param_count()),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnStatsConfig {
    #[serde(default = "yes")]
    pub update_stats: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TentConfig {
    pub lr: f64,
    pub trainable: MaskPolicy,
    /// Running statistics follow each batch. Ignored when `lr` is 0.
    pub update_stats: bool,
    pub stats_momentum: f64,
}

impl Default for TentConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            trainable: MaskPolicy::NormAffineOnly,
            update_stats: true,
            stats_momentum: DEFAULT_STATS_MOMENTUM,
        }
    }
}

/// Entropy-filtered, diversity-filtered, entropy-weighted minimization with
/// an isotropic L2 anchor to the source weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EataLiteConfig {
    pub lr: f64,
    /// Entropy threshold `H0`; `None` means `0.4 * ln K`, filled in at load.
    pub entropy_threshold: Option<f64>,
    /// Cosine similarity above which a sample counts as redundant.
    pub diversity_threshold: f64,
    pub anchor_weight: f64,
    pub avg_momentum: f64,
    pub trainable: MaskPolicy,
    pub update_stats: bool,
    pub stats_momentum: f64,
}

impl Default for EataLiteConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            entropy_threshold: None,
            diversity_threshold: 0.95,
            anchor_weight: 2e-3,
            avg_momentum: 0.9,
            trainable: MaskPolicy::NormAffineOnly,
            update_stats: true,
            stats_momentum: DEFAULT_STATS_MOMENTUM,
        }
    }
}

impl EataLiteConfig {
    pub fn threshold(&self, num_classes: usize) -> f64 {
        self.entropy_threshold
            .unwrap_or_else(|| 0.4 * (num_classes as f64).ln())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum AdapterConfig {
    BnStats(BnStatsConfig),
    Tent(TentConfig),
    EataLite(EataLiteConfig),
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig::Tent(TentConfig::default())
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr.is_finite() && lr >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("adapter.lr = {lr} must be finite and >= 0")))
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::config(format!("adapter momentum {m} must lie in [0, 1]")))
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            AdapterConfig::BnStats(_) => Ok(()),
            AdapterConfig::Tent(c) => {
                check_lr(c.lr)?;
                check_momentum(c.stats_momentum)
            }
            AdapterConfig::EataLite(c) => {
                check_lr(c.lr)?;
                check_momentum(c.stats_momentum)?;
                check_momentum(c.avg_momentum)?;
                if let Some(h0) = c.entropy_threshold {
                    if !(h0.is_finite() && h0 >= 0.0) {
                        return Err(Error::config("adapter.entropy_threshold must be >= 0"));
                    }
                }
                if !(c.diversity_threshold > 0.0 && c.diversity_threshold <= 1.0) {
                    return Err(Error::config("adapter.diversity_threshold must lie in (0, 1]"));
                }
                if !(c.anchor_weight.is_finite() && c.anchor_weight >= 0.0) {
                    return Err(Error::config("adapter.anchor_weight must be >= 0"));
                }
                Ok(())
            }
        }
    }

    /// Fill every default that depends on the architecture.
    pub fn materialize(&mut self, num_classes: usize) {
        if let AdapterConfig::EataLite(c) = self {
            c.entropy_threshold = Some(c.threshold(num_classes));
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            AdapterConfig::BnStats(_) => 0.0,
            AdapterConfig::Tent(c) => c.lr,
            AdapterConfig::EataLite(c) => c.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            AdapterConfig::BnStats(_) => {}
            AdapterConfig::Tent(c) => c.lr = lr,
            AdapterConfig::EataLite(c) => c.lr = lr,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdapterConfig::BnStats(_) => "bn-stats",
            AdapterConfig::Tent(_) => "tent",
            AdapterConfig::EataLite(_) => "eata-lite",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptStepResult {
    pub preds_before: ProbOutput,
    pub preds_after: ProbOutput,
    pub loss: f64,
    pub num_selected: usize,
}

fn mean_entropy(p: &ProbOutput) -> f64 {
    let h = p.entropies();
    h.iter().sum::<f64>() / h.len().max(1) as f64
}

/// Replace the running statistics with those of the batch; weights and the
/// affine parameters are untouched.
pub fn bn_stats_step(model: &mut ModelState, x: &Matrix, update_stats: bool) -> Result<AdaptStepResult> {
    if x.rows() < 2 {
        return Err(Error::Degenerate("bn-stats needs a batch of at least 2 samples".into()));
    }
    let preds_before = model.predict(x)?;
    let preds_after = if update_stats {
        model.forward_with_momentum(x, 1.0)?
    } else {
        preds_before.clone()
    };
    Ok(AdaptStepResult {
        loss: mean_entropy(&preds_after),
        num_selected: x.rows(),
        preds_before,
        preds_after,
    })
}

/// One SGD step on the mean prediction entropy.
pub fn tent_step(model: &mut ModelState, x: &Matrix, config: &TentConfig, mask: &TrainableMask) -> Result<AdaptStepResult> {
    let preds_before = model.predict(x)?;
    if config.lr == 0.0 {
        return Ok(AdaptStepResult {
            loss: mean_entropy(&preds_before),
            num_selected: x.rows(),
            preds_after: preds_before.clone(),
            preds_before,
        });
    }
    if config.update_stats && x.rows() >= 2 {
        model.forward_with_momentum(x, config.stats_momentum)?;
    }
    let (loss, grad) = model.entropy_and_grad(x, mask)?;
    model.sgd_step(&grad, config.lr)?;
    let preds_after = model.predict(x)?;
    Ok(AdaptStepResult {
        preds_before,
        preds_after,
        loss,
        num_selected: x.rows(),
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Selected rows and their weights `exp(H0 - H_i)`: entropy strictly below
/// `h0`, and (when a running average exists) cosine similarity to it at most
/// `diversity_threshold`. Each decision depends on its own row only.
pub fn select_samples(
    probs: &ProbOutput,
    h0: f64,
    diversity_threshold: f64,
    running_avg: Option<&[f64]>,
) -> Vec<(usize, f64)> {
    probs
        .probs
        .iter_rows()
        .enumerate()
        .filter_map(|(i, p)| {
            let h = entropy(p);
            if h >= h0 {
                return None;
            }
            if let Some(avg) = running_avg {
                if cosine(p, avg) > diversity_threshold {
                    return None;
                }
            }
            Some((i, (h0 - h).exp()))
        })
        .collect()
}

/// One EATA-style step. With nothing selected only the statistics move.
pub fn eata_lite_step(
    model: &mut ModelState,
    x: &Matrix,
    config: &EataLiteConfig,
    mask: &TrainableMask,
    running_avg: &mut Option<Vec<f64>>,
) -> Result<AdaptStepResult> {
    let k = model.arch().num_classes;
    let h0 = config.threshold(k);
    if !(h0 >= 0.0) {
        return Err(Error::config("entropy threshold must be >= 0"));
    }
    let preds_before = model.predict(x)?;
    let learning = config.lr > 0.0;
    let current = if learning && config.update_stats && x.rows() >= 2 {
        model.forward_with_momentum(x, config.stats_momentum)?
    } else {
        preds_before.clone()
    };
    let selected = select_samples(&current, h0, config.diversity_threshold, running_avg.as_deref());
    let n = x.rows();
    if selected.is_empty() {
        let preds_after = model.predict(x)?;
        return Ok(AdaptStepResult {
            preds_before,
            preds_after,
            loss: 0.0,
            num_selected: 0,
        });
    }
    let n_sel = selected.len() as f64;
    let mut weights = vec![0.0; n];
    for &(i, w) in &selected {
        // weighted mean over the selected samples
        weights[i] = w * n as f64 / n_sel;
    }
    let (mut loss, mut grad) = model.weighted_entropy_and_grad(x, &weights, mask)?;
    if config.anchor_weight > 0.0 {
        let rho = config.anchor_weight;
        for (i, (t, p)) in model.theta().iter().zip(model.theta_pre()).enumerate() {
            if mask.get(i) {
                let d = t - p;
                loss += rho * d * d;
                grad[i] += 2.0 * rho * d;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite eata-lite loss"));
    }
    if learning {
        model.sgd_step(&grad, config.lr)?;
    }
    let mut mean = vec![0.0; k];
    for &(i, _) in &selected {
        for (m, p) in mean.iter_mut().zip(current.probs.row(i)) {
            *m += p / n_sel;
        }
    }
    *running_avg = Some(match running_avg.take() {
        None => mean,
        Some(avg) => avg
            .iter()
            .zip(&mean)
            .map(|(a, m)| config.avg_momentum * a + (1.0 - config.avg_momentum) * m)
            .collect(),
    });
    let preds_after = model.predict(x)?;
    Ok(AdaptStepResult {
        preds_before,
        preds_after,
        loss,
        num_selected: selected.len(),
    })
}

/// Adapter with its per-run state.
#[derive(Clone, Debug)]
pub struct Adapter {
    config: AdapterConfig,
    mask: TrainableMask,
    running_avg: Option<Vec<f64>>,
}

impl Adapter {
    pub fn new(config: AdapterConfig, model: &ModelState) -> Result<Self> {
        config.validate()?;
        let mask = match &config {
            AdapterConfig::BnStats(_) => TrainableMask::none(model.param_count()),
            AdapterConfig::Tent(c) => c.trainable.build(model),
            AdapterConfig::EataLite(c) => c.trainable.build(model),
        };
        Ok(Self {
            config,
            mask,
            running_avg: None,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn mask(&self) -> &TrainableMask {
        &self.mask
    }

    pub fn step(&mut self, model: &mut ModelState, x: &Matrix) -> Result<AdaptStepResult> {
        match &self.config {
            AdapterConfig::BnStats(c) => bn_stats_step(model, x, c.update_stats),
            AdapterConfig::Tent(c) => tent_step(model, x, c, &self.mask),
            AdapterConfig::EataLite(c) => eata_lite_step(model, x, c, &self.mask, &mut self.running_avg),
        }
    }

    /// Forget per-run state after the model has been re-initialized.
    pub fn reset(&mut self) {
        self.running_avg = None;
    }
}
