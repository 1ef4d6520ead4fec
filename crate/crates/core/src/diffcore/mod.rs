//! Differentiable numerical substrate: tensors, a reverse-mode tape, and the
//! handful of primitives the model is built from.

pub mod kernels;
mod tape;
mod tensor;


pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Tape handles for one attention sub-layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_qkv: Var,
    pub b_qkv: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Causal multi-head self-attention: packed QKV projection, masked
/// attention, output projection.
pub fn causal_mhsa(tape: &mut Tape, x: Var, p: &AttentionVars, n_heads: usize) -> Result<Var> {
    let qkv = tape.linear(x, p.w_qkv, Some(p.b_qkv))?;
    let attended = tape.causal_attention(qkv, n_heads)?;
    tape.linear(attended, p.w_out, Some(p.b_out))
}
