//! Segment-feature datasets: a seeded synthetic generator with an ambiguous
//! shared prefix between paired classes, and the EVPF binary feature format.
//!
//! EVPF, little-endian: magic `EVPF`, version `u32 = 1`, `k_classes u32`,
//! `d_enc u32`, `n_records u64`, then per record `label u32`, `T u32` and
//! `T * d_enc` doubles.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{put_f64s, put_u32, put_u64, to_u32, Reader};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"EVPF";
pub const FEATURE_VERSION: u32 = 1;

/// One sample: `T` encoder feature vectors and the class of the whole
/// sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentFeatureSequence {
    /// `[T, d_enc]`.
    pub features: Tensor,
    pub label: usize,
}

impl SegmentFeatureSequence {
    pub fn new(features: Tensor, label: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] == 0 {
            return Err(Error::config(format!("sample needs shape [T >= 1, d_enc], got {:?}", features.shape())));
        }
        if !features.all_finite() {
            return Err(Error::Numeric("sample contains a non-finite feature".into()));
        }
        Ok(Self { features, label })
    }

    pub fn segments(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn segment(&self, t: usize) -> &[f64] {
        self.features.row(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub k_classes: usize,
    pub d_enc: usize,
    pub samples: Vec<SegmentFeatureSequence>,
}

impl Dataset {
    pub fn new(k_classes: usize, d_enc: usize, samples: Vec<SegmentFeatureSequence>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.label >= k_classes {
                return Err(Error::config(format!("sample {i}: label {} >= k_classes {k_classes}", s.label)));
            }
            if s.features.cols() != d_enc {
                return Err(Error::config(format!("sample {i}: width {} != d_enc {d_enc}", s.features.cols())));
            }
        }
        Ok(Self { k_classes, d_enc, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Common sequence length, or `None` when lengths differ or the set is
    /// empty.
    pub fn uniform_len(&self) -> Option<usize> {
        let t = self.samples.first()?.segments();
        self.samples.iter().all(|s| s.segments() == t).then_some(t)
    }
}

/// Parameters of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub k_classes: usize,
    pub t_segments: usize,
    pub d_enc: usize,
    pub noise_sigma: f64,
    /// Leading segments on which the two classes of a pair share the same
    /// mean trajectory. Zero disables pairing.
    pub ambiguity_depth: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            k_classes: 6,
            t_segments: 10,
            d_enc: 16,
            noise_sigma: 2.0,
            ambiguity_depth: 4,
            n_train: 240,
            n_val: 240,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_classes == 0 || self.t_segments == 0 || self.d_enc == 0 {
            return Err(Error::config("k_classes, t_segments and d_enc must be at least 1"));
        }
        if self.ambiguity_depth >= self.t_segments {
            return Err(Error::config(format!(
                "ambiguity_depth {} must be below t_segments {}",
                self.ambiguity_depth, self.t_segments
            )));
        }
        if self.ambiguity_depth > 0 && self.k_classes % 2 == 1 {
            return Err(Error::config(format!(
                "k_classes = {} is odd but paired ambiguity was requested",
                self.k_classes
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Generated splits plus the noiseless class trajectories they were drawn
/// around.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Dataset,
    pub val: Dataset,
    /// One `[T, d_enc]` mean trajectory per class.
    pub trajectories: Vec<Tensor>,
}

/// Minimum ℓ2 gap between two distinct class means at one segment.
pub const MIN_SEGMENT_GAP: f64 = 1.0;

const STREAM_TRAJECTORIES: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn trajectories(spec: &SynthSpec) -> Vec<Tensor> {
    let (k, t, d) = (spec.k_classes, spec.t_segments, spec.d_enc);
    let mut rng = stream(spec.seed, STREAM_TRAJECTORIES);
    let mut means = vec![vec![0.0; t * d]; k];
    for seg in 0..t {
        let shared = seg < spec.ambiguity_depth;
        // classes 2i and 2i+1 share the prefix; everything else is distinct
        let owners: Vec<Vec<usize>> = if shared {
            (0..k / 2).map(|p| vec![2 * p, 2 * p + 1]).collect()
        } else {
            (0..k).map(|c| vec![c]).collect()
        };
        let mut drawn: Vec<Vec<f64>> = Vec::with_capacity(owners.len());
        while drawn.len() < owners.len() {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            if drawn.iter().all(|o| dist(o, &v) >= MIN_SEGMENT_GAP) {
                drawn.push(v);
            }
        }
        for (group, v) in owners.iter().zip(&drawn) {
            for &c in group {
                means[c][seg * d..(seg + 1) * d].copy_from_slice(v);
            }
        }
    }
    means
        .into_iter()
        .map(|m| Tensor::new(&[t, d], m).expect("trajectory shape"))
        .collect()
}

fn sample_split(spec: &SynthSpec, means: &[Tensor], n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let samples = (0..n)
        .map(|i| {
            let label = i % spec.k_classes;
            let data = means[label]
                .data()
                .iter()
                .map(|&m| if spec.noise_sigma > 0.0 { m + noise.sample(rng) } else { m })
                .collect();
            SegmentFeatureSequence::new(Tensor::new(&[spec.t_segments, spec.d_enc], data)?, label)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(spec.k_classes, spec.d_enc, samples)
}

/// Class-balanced train and validation splits drawn from disjoint random
/// streams of the same seed.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let means = trajectories(spec);
    let train = sample_split(spec, &means, spec.n_train, &mut stream(spec.seed, STREAM_TRAIN))?;
    let val = sample_split(spec, &means, spec.n_val, &mut stream(spec.seed, STREAM_VAL))?;
    Ok(SyntheticData { train, val, trajectories: means })
}

/// Seeded permutation of `0..n`.
pub(crate) fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

pub fn encode_features(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION);
    put_u32(&mut out, to_u32(ds.k_classes, "k_classes")?);
    put_u32(&mut out, to_u32(ds.d_enc, "d_enc")?);
    put_u64(&mut out, ds.samples.len() as u64);
    for s in &ds.samples {
        put_u32(&mut out, to_u32(s.label, "label")?);
        put_u32(&mut out, to_u32(s.segments(), "T")?);
        put_f64s(&mut out, s.features.data());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(r.err(at, format!("unsupported EVPF version {version}")));
    }
    let k_classes = r.u32("k_classes")? as usize;
    let at = r.offset();
    let d_enc = r.u32("d_enc")? as usize;
    if d_enc == 0 {
        return Err(r.err(at, "d_enc is zero"));
    }
    let n = r.u64("n_records")?;
    let mut samples = Vec::new();
    for i in 0..n {
        let at = r.offset();
        let label = r.u32("label")? as usize;
        if label >= k_classes {
            return Err(r.err(at, format!("record {i}: label {label} >= k_classes {k_classes}")));
        }
        let at = r.offset();
        let t = r.u32("T")? as usize;
        if t == 0 {
            return Err(r.err(at, format!("record {i}: T = 0")));
        }
        let data = r.f64s(t * d_enc, &format!("record {i} features"))?;
        samples.push(SegmentFeatureSequence {
            features: Tensor::new(&[t, d_enc], data)?,
            label,
        });
    }
    if r.remaining() != 0 {
        return Err(r.err(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Dataset::new(k_classes, d_enc, samples)
}

pub fn write_feature_file(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_features(ds)?)?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Dataset> {
    decode_features(&fs::read(path)?)
}
