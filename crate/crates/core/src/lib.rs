//! Early action recognition over per-segment encoder features.
//!
//! A causal Transformer decoder aggregates segment features online, a bank of
//! learnable class prototypes regularises the partial-observation features,
//! and a dynamic temporal loss switches from last-segment to all-segment
//! supervision at a chosen epoch.

mod binio;
pub mod cli;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
