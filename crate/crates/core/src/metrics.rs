//! Top-1 accuracy per observation ratio and the area under that curve.

use std::fmt::Write as _;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::diffcore::kernels::argmax;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};

/// Accuracy sampled at ascending observation ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub ratios: Vec<f64>,
    pub acc: Vec<f64>,
}

impl AccuracyCurve {
    pub fn new(ratios: Vec<f64>, acc: Vec<f64>) -> Result<Self> {
        if ratios.len() != acc.len() {
            return Err(Error::config(format!("{} ratios but {} accuracies", ratios.len(), acc.len())));
        }
        if ratios.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("observation ratios must be strictly increasing"));
        }
        if ratios.iter().chain(&acc).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in accuracy curve".into()));
        }
        Ok(Self { ratios, acc })
    }

    /// Evenly spaced ratios `t / T` for `t = 1..=T`.
    pub fn uniform(acc: Vec<f64>) -> Result<Self> {
        let t = acc.len();
        let ratios = (1..=t).map(|i| i as f64 / t as f64).collect();
        Self::new(ratios, acc)
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    /// Accuracy at the last (full-observation) point.
    pub fn last(&self) -> Option<f64> {
        self.acc.last().copied()
    }
}

/// Trapezoidal area under the curve between the first and last ratio, in
/// the same units as the accuracies.
pub fn auc(curve: &AccuracyCurve) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::config(format!("AUC needs at least 2 points, got {}", curve.len())));
    }
    Ok(curve
        .ratios
        .windows(2)
        .zip(curve.acc.windows(2))
        .map(|(r, a)| (r[1] - r[0]) * (a[0] + a[1]) * 0.5)
        .sum())
}

/// Per-segment correctness for one sample under the argmax of each logits
/// row.
fn hits<F: Float + Send + Sync>(params: &ModelParams<F>, sample: &crate::dataio::SegmentFeatureSequence) -> Result<Vec<bool>> {
    let feats = sample.features.cast::<F>();
    let logits = model::logits(params, &feats)?;
    Ok((0..logits.rows()).map(|t| argmax(logits.row(t)) == sample.label).collect())
}

/// Top-1 accuracy at each `ρ = t / T`, sharded across threads.
pub fn eval_curve<F: Float + Send + Sync>(params: &ModelParams<F>, dataset: &Dataset) -> Result<AccuracyCurve> {
    if dataset.is_empty() {
        return Err(Error::config("cannot evaluate an empty dataset"));
    }
    let t = dataset
        .uniform_len()
        .ok_or_else(|| Error::config("evaluation needs every sample to have the same number of segments"))?;
    let per_sample = dataset
        .samples
        .par_iter()
        .map(|s| hits(params, s))
        .collect::<Result<Vec<_>>>()?;
    let mut correct = vec![0usize; t];
    for h in &per_sample {
        for (c, &ok) in correct.iter_mut().zip(h) {
            *c += ok as usize;
        }
    }
    let n = dataset.len() as f64;
    AccuracyCurve::uniform(correct.into_iter().map(|c| c as f64 / n).collect())
}

/// `rho,top1` rows followed by `auc,<value>`.
pub fn curve_to_csv(curve: &AccuracyCurve) -> Result<String> {
    let area = auc(curve)?;
    let mut out = String::from("rho,top1\n");
    for (r, a) in curve.ratios.iter().zip(&curve.acc) {
        let _ = writeln!(out, "{r},{a}");
    }
    let _ = writeln!(out, "auc,{area}");
    Ok(out)
}

/// Reads `rho,top1` rows; a header line and a trailing `auc` row are
/// skipped.
pub fn parse_curve_csv(text: &str) -> Result<AccuracyCurve> {
    let mut ratios = Vec::new();
    let mut acc = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("rho") || line.starts_with("auc") {
            continue;
        }
        let mut cells = line.split(',');
        let mut next = || -> Result<f64> {
            cells
                .next()
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| Error::config(format!("curve line {}: expected `rho,top1`", i + 1)))
        };
        ratios.push(next()?);
        acc.push(next()?);
    }
    AccuracyCurve::new(ratios, acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_curve_is_rectangle() {
        let ratios: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let c = AccuracyCurve::new(ratios, vec![0.7; 10]).unwrap();
        assert!((auc(&c).unwrap() - 0.9 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn collinear_midpoint_does_not_change_area() {
        let a = AccuracyCurve::new(vec![0.2, 1.0], vec![10.0, 50.0]).unwrap();
        let b = AccuracyCurve::new(vec![0.2, 0.6, 1.0], vec![10.0, 30.0, 50.0]).unwrap();
        assert!((auc(&a).unwrap() - auc(&b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_curves() {
        assert!(AccuracyCurve::new(vec![0.5, 0.5], vec![1.0, 1.0]).is_err());
        assert!(AccuracyCurve::new(vec![0.5], vec![1.0, 1.0]).is_err());
        let one = AccuracyCurve::new(vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(auc(&one), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip() {
        let c = AccuracyCurve::uniform(vec![0.1, 0.25, 0.5, 0.75]).unwrap();
        let text = curve_to_csv(&c).unwrap();
        assert!(text.starts_with("rho,top1\n"));
        assert!(text.trim_end().lines().last().unwrap().starts_with("auc,"));
        assert_eq!(parse_curve_csv(&text).unwrap(), c);
    }
}
