use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of the decoder head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of the incoming per-segment encoder features.
    pub d_enc: usize,
    /// Decoder width, shared by prototypes and the feature predictor.
    pub d: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Maximum number of segments (rows of the positional table).
    pub t_max: usize,
    pub k_classes: usize,
    pub predictor_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default: two blocks of width 64.
    pub fn desk() -> Self {
        Self {
            d_enc: 16,
            d: 64,
            n_blocks: 2,
            n_heads: 4,
            t_max: 10,
            k_classes: 6,
            predictor_hidden: 64,
            seed: 0,
        }
    }

    /// Decoder of depth 6 and width 768 fed by 768-wide encoder features.
    pub fn full_scale(k_classes: usize) -> Self {
        Self {
            d_enc: 768,
            d: 768,
            n_blocks: 6,
            n_heads: 12,
            t_max: 10,
            k_classes,
            predictor_hidden: 768,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_enc", self.d_enc),
            ("d", self.d),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("t_max", self.t_max),
            ("k_classes", self.k_classes),
            ("predictor_hidden", self.predictor_hidden),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        Ok(())
    }
}
