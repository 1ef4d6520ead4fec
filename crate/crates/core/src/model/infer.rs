//! Tape-free forward used for evaluation and online inference.
//!
//! Runs the same kernels in the same order as [`forward_full`], so at `f64`
//! the results agree with the training forward exactly.
//!
//! [`forward_full`]: super::forward_full

use num_traits::Float;

use super::params::ModelParams;
use crate::diffcore::kernels;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

fn lin<F: Float>(x: &[F], w: &Tensor<F>, b: &Tensor<F>) -> Vec<F> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    kernels::linear(x, x.len() / k, k, w.data(), n, Some(b.data()))
}

fn ln<F: Float>(x: &[F], g: &Tensor<F>, b: &Tensor<F>) -> Vec<F> {
    kernels::layer_norm(x, g.len(), g.data(), b.data()).0
}

fn add_assign<F: Float>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

/// Decoder input for segments `start..start + rows`: projection plus
/// positional embedding.
pub(crate) fn embed<F: Float>(params: &ModelParams<F>, features: &[F], start: usize) -> Vec<F> {
    let w = &params.weights;
    let mut x = lin(features, &w.proj_w, &w.proj_b);
    let d = params.config.d;
    let pos = &w.pos_emb.data()[start * d..start * d + x.len()];
    add_assign(&mut x, pos);
    x
}

/// Decoder stack plus final norm over an embedded prefix `[t, d]`.
pub(crate) fn decode<F: Float>(params: &ModelParams<F>, tokens: &[F]) -> Vec<F> {
    let cfg = &params.config;
    let t = tokens.len() / cfg.d;
    let mut h = tokens.to_vec();
    for b in &params.weights.blocks {
        let a = ln(&h, &b.ln1_gamma, &b.ln1_beta);
        let qkv = lin(&a, &b.w_qkv, &b.b_qkv);
        let (att, _) = kernels::causal_attention(&qkv, t, cfg.d, cfg.n_heads);
        let a = lin(&att, &b.w_out, &b.b_out);
        add_assign(&mut h, &a);
        let m = ln(&h, &b.ln2_gamma, &b.ln2_beta);
        let mut m = lin(&m, &b.w_fc, &b.b_fc);
        m.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        let m = lin(&m, &b.w_proj, &b.b_proj);
        add_assign(&mut h, &m);
    }
    ln(&h, &params.weights.ln_f_gamma, &params.weights.ln_f_beta)
}

fn check_features<F: Float>(params: &ModelParams<F>, features: &Tensor<F>) -> Result<usize> {
    let cfg = &params.config;
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != cfg.d_enc {
        return Err(Error::dim("features", shape, &[cfg.t_max, cfg.d_enc]));
    }
    if shape[0] == 0 {
        return Err(Error::config("sequence has no segments"));
    }
    if shape[0] > cfg.t_max {
        return Err(Error::Capacity { len: shape[0], capacity: cfg.t_max });
    }
    Ok(shape[0])
}

/// Decoder features `z` for a whole sequence, `[T, d]` row-major.
pub fn decoder_features<F: Float>(params: &ModelParams<F>, features: &Tensor<F>) -> Result<Vec<F>> {
    check_features(params, features)?;
    let tokens = embed(params, features.data(), 0);
    Ok(decode(params, &tokens))
}

/// Per-segment logits `[T, K]` for a whole sequence.
pub fn logits<F: Float>(params: &ModelParams<F>, features: &Tensor<F>) -> Result<Tensor<F>> {
    let t = check_features(params, features)?;
    let z = decoder_features(params, features)?;
    let w = &params.weights;
    Tensor::new(&[t, params.config.k_classes], lin(&z, &w.head_w, &w.head_b))
}

/// Per-segment class probabilities `[T, K]` for a whole sequence.
pub fn probabilities<F: Float>(params: &ModelParams<F>, features: &Tensor<F>) -> Result<Tensor<F>> {
    let mut out = logits(params, features)?;
    let k = params.config.k_classes;
    out.data_mut().chunks_mut(k).for_each(kernels::softmax_in_place);
    Ok(out)
}

/// Projected segment features kept by an online session.
///
/// Only the embedded rows are stored; raw features of earlier segments are
/// never needed again.
#[derive(Clone, Debug, Default)]
pub struct IncrementalState<F = f64> {
    tokens: Vec<F>,
    steps: usize,
}

impl<F: Float> IncrementalState<F> {
    pub fn new() -> Self {
        Self { tokens: Vec::new(), steps: 0 }
    }

    /// Segments consumed so far.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn reset(&mut self) {
        self.tokens.clear();
        self.steps = 0;
    }
}

/// Consumes one more segment and returns the class distribution given
/// everything seen so far.
pub fn forward_step<F: Float>(params: &ModelParams<F>, state: &mut IncrementalState<F>, feature: &[F]) -> Result<Vec<F>> {
    let cfg = &params.config;
    if feature.len() != cfg.d_enc {
        return Err(Error::dim("forward_step feature", &[feature.len()], &[cfg.d_enc]));
    }
    if state.steps >= cfg.t_max {
        return Err(Error::Capacity { len: state.steps + 1, capacity: cfg.t_max });
    }
    let token = embed(params, feature, state.steps);
    state.tokens.extend_from_slice(&token);
    state.steps += 1;
    let z = decode(params, &state.tokens);
    let last = &z[(state.steps - 1) * cfg.d..];
    let w = &params.weights;
    let mut probs = lin(last, &w.head_w, &w.head_b);
    kernels::softmax_in_place(&mut probs);
    Ok(probs)
}
