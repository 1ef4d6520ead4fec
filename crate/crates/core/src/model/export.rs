//! Raw prototype and final-feature vectors as CSV, for external plotting.

use std::fmt::Write as _;
use std::str::FromStr;

use super::infer;
use super::params::ModelParams;
use crate::dataio::SegmentFeatureSequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    Prototype,
    FinalFeature,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Prototype => "prototype",
            EmbeddingKind::FinalFeature => "final_feature",
        }
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prototype" => Ok(EmbeddingKind::Prototype),
            "final_feature" => Ok(EmbeddingKind::FinalFeature),
            other => Err(Error::config(format!("unknown embedding kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub kind: EmbeddingKind,
    pub class: usize,
    pub vector: Vec<f64>,
}

/// One row per prototype, then one row per sample holding its final decoder
/// feature `z(T)`.
pub fn export_embeddings(params: &ModelParams, samples: &[SegmentFeatureSequence]) -> Result<Vec<EmbeddingRow>> {
    let d = params.config.d;
    let protos = &params.weights.prototypes.p;
    let mut rows: Vec<EmbeddingRow> = (0..protos.rows())
        .map(|k| EmbeddingRow {
            kind: EmbeddingKind::Prototype,
            class: k,
            vector: protos.row(k).to_vec(),
        })
        .collect();
    for s in samples {
        let z = infer::decoder_features(params, &s.features)?;
        rows.push(EmbeddingRow {
            kind: EmbeddingKind::FinalFeature,
            class: s.label,
            vector: z[z.len() - d..].to_vec(),
        });
    }
    Ok(rows)
}

/// Header `kind,class,dim0,...,dim{d-1}`; values with 17 significant digits.
pub fn embeddings_to_csv(rows: &[EmbeddingRow], d: usize) -> String {
    let mut out = String::from("kind,class");
    for i in 0..d {
        let _ = write!(out, ",dim{i}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.kind.as_str(), r.class);
        for v in &r.vector {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings_csv(text: &str) -> Result<Vec<EmbeddingRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::config("empty embeddings file"))?;
    let d = header.split(',').count().saturating_sub(2);
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |what: &str| Error::config(format!("embeddings line {}: {what}", i + 2));
        let mut cells = line.split(',');
        let kind = cells.next().ok_or_else(|| bad("missing kind"))?.parse()?;
        let class = cells
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("bad class"))?;
        let vector = cells
            .map(|c| c.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>>>()?;
        if vector.len() != d {
            return Err(bad("wrong number of dimensions"));
        }
        rows.push(EmbeddingRow { kind, class, vector });
    }
    Ok(rows)
}
