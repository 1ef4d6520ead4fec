use super::config::ModelConfig;
use super::params::{MlpParams, ParamVars};
use crate::diffcore::{causal_mhsa, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Tape handles for everything one sample's training forward produces.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    /// Projected encoder features `[T, d]`.
    pub z_enc: Var,
    /// Decoder features `[T, d]`.
    pub z: Var,
    /// Class logits per segment `[T, K]`.
    pub logits: Var,
    /// Prototype scores from the detached final feature `[1, K]`.
    pub s_proto: Var,
    /// Feature-predictor output `f(z)` `[T, d]`.
    pub predicted: Var,
    /// Scores of `f(z(t))` against the detached prototypes `[T, K]`.
    pub s_reg: Var,
    /// Number of segments.
    pub t: usize,
}

pub(crate) fn mlp(tape: &mut Tape, x: Var, p: &MlpParams<Var>) -> Result<Var> {
    let h = tape.linear(x, p.w1, Some(p.b1))?;
    let h = tape.gelu(h);
    tape.linear(h, p.w2, Some(p.b2))
}

/// Runs the whole sequence through the model at once under the causal mask.
pub fn forward_full(tape: &mut Tape, params: &ParamVars, cfg: &ModelConfig, features: &Tensor) -> Result<ForwardOutputs> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != cfg.d_enc {
        return Err(Error::dim("forward_full features", shape, &[shape[0], cfg.d_enc]));
    }
    let t = shape[0];
    if t == 0 {
        return Err(Error::config("sequence has no segments"));
    }
    if t > cfg.t_max {
        return Err(Error::Capacity { len: t, capacity: cfg.t_max });
    }

    let x = tape.constant(features.clone());
    let z_enc = tape.linear(x, params.proj_w, Some(params.proj_b))?;
    let pos = tape.slice_rows(params.pos_emb, 0, t)?;
    let mut h = tape.add(z_enc, pos)?;
    for block in &params.blocks {
        let a = tape.layer_norm(h, block.ln1_gamma, block.ln1_beta)?;
        let a = causal_mhsa(tape, a, &block.attention(), cfg.n_heads)?;
        h = tape.add(h, a)?;
        let m = tape.layer_norm(h, block.ln2_gamma, block.ln2_beta)?;
        let m = tape.linear(m, block.w_fc, Some(block.b_fc))?;
        let m = tape.gelu(m);
        let m = tape.linear(m, block.w_proj, Some(block.b_proj))?;
        h = tape.add(h, m)?;
    }
    let z = tape.layer_norm(h, params.ln_f_gamma, params.ln_f_beta)?;
    let logits = tape.linear(z, params.head_w, Some(params.head_b))?;

    let z_last = tape.row(z, t - 1)?;
    let z_last = tape.stop_grad(z_last);
    let s_proto = tape.neg_l2_scores(z_last, params.prototypes.p)?;

    let predicted = mlp(tape, z, &params.predictor)?;
    let protos = tape.stop_grad(params.prototypes.p);
    let s_reg = tape.neg_l2_scores(predicted, protos)?;

    Ok(ForwardOutputs { z_enc, z, logits, s_proto, predicted, s_reg, t })
}
