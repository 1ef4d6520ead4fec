//! Training loop: one tape per batch, AdamW over every parameter group,
//! epoch-scheduled temporal loss and best-AUC tracking.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{permutation, Dataset, SegmentFeatureSequence};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{loss_total, uses_last_only, LossBreakdown, LossConfig, TemporalMode};
use crate::metrics::{auc, eval_curve};
use crate::model::{forward_full, ModelParams};
use crate::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Maximum global gradient norm.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub loss: LossConfig,
    /// Evaluate on the validation split every this many epochs (the last
    /// epoch is always evaluated). Zero disables periodic evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            seed: 0,
            loss: LossConfig::default(),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config(format!("grad_clip {c} must be positive")));
            }
        }
        self.loss.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Evaluation snapshot recorded in the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub ratios: Vec<f64>,
    pub acc: Vec<f64>,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub epoch: usize,
    /// Sample-weighted mean over the epoch.
    pub losses: LossBreakdown,
    /// `only_last`, `all` or `soft`.
    pub regime: String,
    pub eval: Option<EvalEntry>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochEntry>,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Copy with wall-clock fields zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    }

    pub fn last_eval(&self) -> Option<&EvalEntry> {
        self.epochs.iter().rev().find_map(|e| e.eval.as_ref())
    }
}

fn check_compatible(params: &ModelParams, samples: &[&SegmentFeatureSequence]) -> Result<()> {
    let cfg = &params.config;
    for s in samples {
        if s.label >= cfg.k_classes {
            return Err(Error::Index { what: "class", index: s.label, len: cfg.k_classes });
        }
        if s.features.cols() != cfg.d_enc {
            return Err(Error::config(format!("feature width {} != d_enc {}", s.features.cols(), cfg.d_enc)));
        }
        if s.segments() > cfg.t_max {
            return Err(Error::Capacity { len: s.segments(), capacity: cfg.t_max });
        }
    }
    Ok(())
}

fn clip_global_norm(params: &mut ModelParams, max_norm: f64) {
    let sq: f64 = params
        .weights
        .iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in params.weights.iter_mut() {
            if let Some(g) = t.grad() {
                let scaled = g.iter().map(|v| v * s).collect();
                t.set_grad(scaled).expect("same length");
            }
        }
    }
}

/// Forward every sample on one tape, average the total loss over the batch
/// and backpropagate. Leaves the gradient on each parameter tensor and
/// returns the batch-mean loss terms.
pub fn compute_gradients(params: &mut ModelParams, batch: &[&SegmentFeatureSequence], epoch: usize, loss: &LossConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let t = batch[0].segments();
    if batch.iter().any(|s| s.segments() != t) {
        return Err(Error::config("batch mixes sequence lengths"));
    }
    check_compatible(params, batch)?;

    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let weight = 1.0 / batch.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut total = None;
    for s in batch {
        let out = forward_full(&mut tape, &vars, &params.config, &s.features)?;
        let lv = loss_total(&mut tape, &out, s.label, epoch, loss)?;
        mean.accumulate(&lv.values(&tape), weight);
        total = Some(match total {
            None => lv.l_tot,
            Some(acc) => tape.add(acc, lv.l_tot)?,
        });
    }
    if let Some((name, v)) = mean.first_non_finite() {
        return Err(Error::Numeric(format!("{name} is {v} at epoch {epoch}")));
    }
    let objective = tape.scale(total.expect("non-empty batch"), weight);
    let grads = tape.backward(objective)?;
    for (t, v) in params.weights.iter_mut().zip(vars.iter()) {
        t.set_grad(grads.get_or_zeros(*v))?;
    }
    Ok(mean)
}

/// One optimisation step: gradients, optional clipping, AdamW update.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch: &[&SegmentFeatureSequence],
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let losses = compute_gradients(params, batch, epoch, &cfg.loss)?;
    if params.weights.iter().any(|t| t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
        return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}")));
    }
    if let Some(c) = cfg.grad_clip {
        clip_global_norm(params, c);
    }
    opt.step(&mut params.weights);
    params.weights.iter_mut().for_each(Tensor::clear_grad);
    Ok(losses)
}

/// Best validation snapshot seen during [`fit`].
#[derive(Clone, Debug)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub auc: f64,
    pub params: ModelParams,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters after the final epoch.
    pub params: ModelParams,
    pub best: Option<BestCheckpoint>,
    pub report: TrainReport,
}

impl FitOutcome {
    /// Best-AUC parameters when validation ran, the final ones otherwise.
    pub fn best_params(&self) -> &ModelParams {
        self.best.as_ref().map_or(&self.params, |b| &b.params)
    }
}

fn regime(mode: TemporalMode, epoch: usize, e_star: usize) -> &'static str {
    match uses_last_only(mode, epoch, e_star) {
        Some(true) => "only_last",
        Some(false) => "all",
        None => "soft",
    }
}

pub fn fit(params: ModelParams, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    fit_with(params, train, val, cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    mut params: ModelParams,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochEntry),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let all: Vec<&SegmentFeatureSequence> = train.samples.iter().collect();
    check_compatible(&params, &all)?;

    let mut opt = AdamW::new(cfg.optimizer(), &params.weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut best: Option<BestCheckpoint> = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let order = permutation(train.len(), &mut rng);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SegmentFeatureSequence> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let l = train_step(&mut params, &mut opt, &batch, epoch, cfg)?;
            sum.accumulate(&l, batch.len() as f64 / train.len() as f64);
        }

        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let eval = if due && !val.is_empty() {
            let curve = eval_curve(&params, val)?;
            let area = auc(&curve)?;
            if best.as_ref().is_none_or(|b| area > b.auc) {
                best = Some(BestCheckpoint { epoch, auc: area, params: params.clone() });
            }
            Some(EvalEntry { ratios: curve.ratios, acc: curve.acc, auc: area })
        } else {
            None
        };

        let entry = EpochEntry {
            epoch,
            losses: sum,
            regime: regime(cfg.loss.mode_temporal, epoch, cfg.loss.e_star).to_string(),
            eval,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        report.epochs.push(entry);
    }
    Ok(FitOutcome { params, best, report })
}
