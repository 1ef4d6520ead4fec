//! The decoder head: projection of encoder features, positional table,
//! causal decoder stack, classification head, prototype bank and feature
//! predictor.

mod checkpoint;
mod config;
mod export;
mod forward;
mod infer;
mod params;


pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, ensure_matches, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use export::{embeddings_to_csv, export_embeddings, parse_embeddings_csv, EmbeddingKind, EmbeddingRow};
pub use forward::{forward_full, ForwardOutputs};
pub use infer::{decoder_features, forward_step, logits, probabilities, IncrementalState};
pub use params::{BlockParams, MlpParams, ModelParams, ParamGroup, ParamInfo, ParamSet, ParamVars, PrototypeBank};
