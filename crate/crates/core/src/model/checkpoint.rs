//! Binary parameter checkpoints.
//!
//! Layout, all little-endian: magic `EVPC`, version `u32`, the config block
//! (`d_enc`, `d`, `n_blocks`, `n_heads`, `t_max`, `k_classes`,
//! `predictor_hidden` as `u32`, then `seed` as `u64`), then every parameter
//! tensor in declaration order as `f64`.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::binio::{put_f64s, put_u32, put_u64, to_u32, Reader};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVPC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + 8 * params.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    for (name, v) in [
        ("d_enc", c.d_enc),
        ("d", c.d),
        ("n_blocks", c.n_blocks),
        ("n_heads", c.n_heads),
        ("t_max", c.t_max),
        ("k_classes", c.k_classes),
        ("predictor_hidden", c.predictor_hidden),
    ] {
        put_u32(&mut out, to_u32(v, name)?);
    }
    put_u64(&mut out, c.seed);
    for t in params.weights.iter() {
        put_f64s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(at, format!("unsupported checkpoint version {version}")));
    }
    let at = r.offset();
    let mut f = [0usize; 7];
    for (slot, name) in f.iter_mut().zip(["d_enc", "d", "n_blocks", "n_heads", "t_max", "k_classes", "predictor_hidden"]) {
        *slot = r.u32(name)? as usize;
    }
    let config = ModelConfig {
        d_enc: f[0],
        d: f[1],
        n_blocks: f[2],
        n_heads: f[3],
        t_max: f[4],
        k_classes: f[5],
        predictor_hidden: f[6],
        seed: r.u64("seed")?,
    };
    config
        .validate()
        .map_err(|e| r.err(at, format!("invalid config block: {e}")))?;
    // shapes come from a fresh skeleton; values are overwritten below
    let mut params = ModelParams::init(&config)?;
    let infos = params.weights.infos();
    for (t, info) in params.weights.iter_mut().zip(&infos) {
        let data = r.f64s(t.len(), &info.name)?;
        *t = Tensor::new(t.shape(), data)?;
    }
    if r.remaining() != 0 {
        return Err(r.err(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&fs::read(path)?)
}

/// Fails with the first architecture field that differs from `expected`.
/// The initialisation seed is not compared.
pub fn ensure_matches(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let pairs: [(&'static str, u64, u64); 7] = [
        ("d_enc", found.d_enc as u64, expected.d_enc as u64),
        ("d", found.d as u64, expected.d as u64),
        ("n_blocks", found.n_blocks as u64, expected.n_blocks as u64),
        ("n_heads", found.n_heads as u64, expected.n_heads as u64),
        ("t_max", found.t_max as u64, expected.t_max as u64),
        ("k_classes", found.k_classes as u64, expected.k_classes as u64),
        ("predictor_hidden", found.predictor_hidden as u64, expected.predictor_hidden as u64),
    ];
    match pairs.iter().find(|(_, a, b)| a != b) {
        Some((field, a, b)) => Err(Error::Mismatch {
            field,
            checkpoint: a.to_string(),
            expected: b.to_string(),
        }),
        None => Ok(()),
    }
}
