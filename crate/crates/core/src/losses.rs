//! Training objectives: per-step classification, last-step and all-steps
//! temporal losses with an epoch-scheduled switch, prototype learning and
//! the prototype-prediction regulariser (plus the feature-prediction
//! ablations).

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ForwardOutputs;

/// Which classification loss drives the temporal tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TemporalMode {
    /// Last segment only.
    OnlyLast,
    /// Mean over all segments.
    All,
    /// Last segment up to and including `e_star`, all segments afterwards.
    DynamicHard,
    /// Sigmoid blend of the two with the epoch as schedule variable.
    DynamicSoft,
}

/// Source of the regularisation signal for partial observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum RegMode {
    /// Predict the class prototype from every `z(t)`.
    Prototypes,
    /// Predict the next decoder feature `z(t+1)`.
    PredNext,
    /// Predict the final decoder feature `z(T)`.
    PredFinal,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub mode_temporal: TemporalMode,
    /// Switch epoch; epochs are 1-based.
    pub e_star: usize,
    /// Steepness of the soft switch.
    pub alpha: f64,
    /// Label smoothing of the classification loss.
    pub epsilon_smooth: f64,
    pub reg_mode: RegMode,
    /// Whether the prototype-learning term is part of the total.
    pub use_prototypes: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode_temporal: TemporalMode::DynamicHard,
            e_star: 15,
            alpha: 1.0,
            epsilon_smooth: 0.1,
            reg_mode: RegMode::Prototypes,
            use_prototypes: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode_temporal == TemporalMode::DynamicSoft && !(self.alpha > 0.0) {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.epsilon_smooth) {
            return Err(Error::config(format!("epsilon_smooth {} outside [0, 1)", self.epsilon_smooth)));
        }
        if self.reg_mode == RegMode::Prototypes && !self.use_prototypes {
            return Err(Error::config("reg_mode prototypes needs the prototype bank to be trained"));
        }
        Ok(())
    }
}

/// Scalar loss values for one step (or a batch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_dyn: f64,
    pub l_proto: f64,
    pub l_reg: f64,
    pub l_tot: f64,
}

impl LossBreakdown {
    /// First non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        [("l_dyn", self.l_dyn), ("l_proto", self.l_proto), ("l_reg", self.l_reg), ("l_tot", self.l_tot)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.l_dyn += weight * other.l_dyn;
        self.l_proto += weight * other.l_proto;
        self.l_reg += weight * other.l_reg;
        self.l_tot += weight * other.l_tot;
    }
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_dyn: Var,
    pub l_proto: Var,
    pub l_reg: Var,
    pub l_tot: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_dyn: tape.value(self.l_dyn).item(),
            l_proto: tape.value(self.l_proto).item(),
            l_reg: tape.value(self.l_reg).item(),
            l_tot: tape.value(self.l_tot).item(),
        }
    }
}

/// Smoothed cross-entropy on logits row `t` (1-based).
pub fn loss_clf(tape: &mut Tape, out: &ForwardOutputs, y: usize, t: usize, epsilon: f64) -> Result<Var> {
    if t == 0 || t > out.t {
        return Err(Error::Index { what: "segment (1-based)", index: t, len: out.t });
    }
    let row = tape.row(out.logits, t - 1)?;
    tape.cross_entropy(row, y, epsilon)
}

pub fn loss_ol(tape: &mut Tape, out: &ForwardOutputs, y: usize, epsilon: f64) -> Result<Var> {
    loss_clf(tape, out, y, out.t, epsilon)
}

/// Mean of the per-segment classification losses.
pub fn loss_all(tape: &mut Tape, out: &ForwardOutputs, y: usize, epsilon: f64) -> Result<Var> {
    tape.cross_entropy(out.logits, y, epsilon)
}

/// Weight of the last-step loss in the soft schedule:
/// `σ(-α (epoch - e_star))`.
pub fn soft_switch_weight(epoch: usize, e_star: usize, alpha: f64) -> f64 {
    let x = -alpha * (epoch as f64 - e_star as f64);
    1.0 / (1.0 + (-x).exp())
}

/// Which regime the temporal loss is in at `epoch`.
pub fn uses_last_only(mode: TemporalMode, epoch: usize, e_star: usize) -> Option<bool> {
    match mode {
        TemporalMode::OnlyLast => Some(true),
        TemporalMode::All => Some(false),
        TemporalMode::DynamicHard => Some(epoch <= e_star),
        TemporalMode::DynamicSoft => None,
    }
}

pub fn loss_dyn(tape: &mut Tape, out: &ForwardOutputs, y: usize, epoch: usize, cfg: &LossConfig) -> Result<Var> {
    let eps = cfg.epsilon_smooth;
    match uses_last_only(cfg.mode_temporal, epoch, cfg.e_star) {
        Some(true) => loss_ol(tape, out, y, eps),
        Some(false) => loss_all(tape, out, y, eps),
        None => {
            let w = soft_switch_weight(epoch, cfg.e_star, cfg.alpha);
            let ol = loss_ol(tape, out, y, eps)?;
            let all = loss_all(tape, out, y, eps)?;
            let a = tape.scale(ol, w);
            let b = tape.scale(all, 1.0 - w);
            tape.add(a, b)
        }
    }
}

/// Cross-entropy over the prototype scores of the detached final feature;
/// only the prototype bank receives gradient.
pub fn loss_proto(tape: &mut Tape, out: &ForwardOutputs, y: usize) -> Result<Var> {
    tape.cross_entropy(out.s_proto, y, 0.0)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

pub fn loss_reg(tape: &mut Tape, out: &ForwardOutputs, y: usize, mode: RegMode) -> Result<Var> {
    match mode {
        RegMode::None => Ok(zero(tape)),
        RegMode::Prototypes => tape.cross_entropy(out.s_reg, y, 0.0),
        RegMode::PredNext => {
            if out.t < 2 {
                return Ok(zero(tape));
            }
            let pred = tape.slice_rows(out.predicted, 0, out.t - 1)?;
            let next = tape.slice_rows(out.z, 1, out.t)?;
            let next = tape.stop_grad(next);
            tape.mse(pred, next)
        }
        RegMode::PredFinal => {
            let z = tape.value(out.z);
            let last = z.row(out.t - 1).to_vec();
            let d = last.len();
            let target = Tensor::new(&[out.t, d], last.repeat(out.t))?;
            let target = tape.constant(target);
            tape.mse(out.predicted, target)
        }
    }
}

/// Unweighted sum of the three terms.
pub fn loss_total(tape: &mut Tape, out: &ForwardOutputs, y: usize, epoch: usize, cfg: &LossConfig) -> Result<LossVars> {
    let l_dyn = loss_dyn(tape, out, y, epoch, cfg)?;
    let l_proto = if cfg.use_prototypes { loss_proto(tape, out, y)? } else { zero(tape) };
    let l_reg = loss_reg(tape, out, y, cfg.reg_mode)?;
    let partial = tape.add(l_dyn, l_proto)?;
    let l_tot = tape.add(partial, l_reg)?;
    Ok(LossVars { l_dyn, l_proto, l_reg, l_tot })
}
