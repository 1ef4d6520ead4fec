use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::diffcore::{AttentionVars, Tape, Tensor, Var};
use crate::error::Result;

const INIT_STD: f64 = 0.02;

/// Which part of the model a parameter belongs to. Used by gradient-flow
/// audits and by the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Projection, positional table, decoder blocks, final norm and head.
    Encoder,
    Predictor,
    Prototypes,
}

/// One pre-norm decoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub ln1_gamma: P,
    pub ln1_beta: P,
    pub w_qkv: P,
    pub b_qkv: P,
    pub w_out: P,
    pub b_out: P,
    pub ln2_gamma: P,
    pub ln2_beta: P,
    pub w_fc: P,
    pub b_fc: P,
    pub w_proj: P,
    pub b_proj: P,
}

/// Learnable class prototypes, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<P> {
    pub p: P,
    /// When set the optimizer leaves the bank untouched.
    pub frozen: bool,
}

/// Two-layer MLP `d -> hidden -> d` with GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

/// Every learnable slot of the model, generic over what fills the slot:
/// tensors for storage, [`Var`]s once registered on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<P> {
    pub proj_w: P,
    pub proj_b: P,
    pub pos_emb: P,
    pub blocks: Vec<BlockParams<P>>,
    pub ln_f_gamma: P,
    pub ln_f_beta: P,
    pub head_w: P,
    pub head_b: P,
    pub prototypes: PrototypeBank<P>,
    pub predictor: MlpParams<P>,
}

/// Name, group and whether decoupled weight decay applies.
#[derive(Clone, Debug)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    pub decay: bool,
}

impl<P> ParamSet<P> {
    /// Slots in declaration order; checkpoints use this order.
    pub fn iter(&self) -> impl Iterator<Item = &P> {
        let head = [&self.proj_w, &self.proj_b, &self.pos_emb];
        let blocks = self.blocks.iter().flat_map(|b| {
            [
                &b.ln1_gamma, &b.ln1_beta, &b.w_qkv, &b.b_qkv, &b.w_out, &b.b_out,
                &b.ln2_gamma, &b.ln2_beta, &b.w_fc, &b.b_fc, &b.w_proj, &b.b_proj,
            ]
        });
        let tail = [
            &self.ln_f_gamma,
            &self.ln_f_beta,
            &self.head_w,
            &self.head_b,
            &self.prototypes.p,
            &self.predictor.w1,
            &self.predictor.b1,
            &self.predictor.w2,
            &self.predictor.b2,
        ];
        head.into_iter().chain(blocks).chain(tail)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut P> {
        let head = [&mut self.proj_w, &mut self.proj_b, &mut self.pos_emb];
        let blocks = self.blocks.iter_mut().flat_map(|b| {
            [
                &mut b.ln1_gamma, &mut b.ln1_beta, &mut b.w_qkv, &mut b.b_qkv, &mut b.w_out,
                &mut b.b_out, &mut b.ln2_gamma, &mut b.ln2_beta, &mut b.w_fc, &mut b.b_fc,
                &mut b.w_proj, &mut b.b_proj,
            ]
        });
        let tail = [
            &mut self.ln_f_gamma,
            &mut self.ln_f_beta,
            &mut self.head_w,
            &mut self.head_b,
            &mut self.prototypes.p,
            &mut self.predictor.w1,
            &mut self.predictor.b1,
            &mut self.predictor.w2,
            &mut self.predictor.b2,
        ];
        head.into_iter().chain(blocks).chain(tail)
    }

    /// Metadata for each slot, aligned with [`ParamSet::iter`].
    pub fn infos(&self) -> Vec<ParamInfo> {
        let info = |name: String, group, decay| ParamInfo { name, group, decay };
        let mut out = vec![
            info("proj_w".into(), ParamGroup::Encoder, true),
            info("proj_b".into(), ParamGroup::Encoder, false),
            info("pos_emb".into(), ParamGroup::Encoder, false),
        ];
        for i in 0..self.blocks.len() {
            for (n, decay) in [
                ("ln1_gamma", false),
                ("ln1_beta", false),
                ("w_qkv", true),
                ("b_qkv", false),
                ("w_out", true),
                ("b_out", false),
                ("ln2_gamma", false),
                ("ln2_beta", false),
                ("w_fc", true),
                ("b_fc", false),
                ("w_proj", true),
                ("b_proj", false),
            ] {
                out.push(info(format!("blocks.{i}.{n}"), ParamGroup::Encoder, decay));
            }
        }
        out.extend([
            info("ln_f_gamma".into(), ParamGroup::Encoder, false),
            info("ln_f_beta".into(), ParamGroup::Encoder, false),
            info("head_w".into(), ParamGroup::Encoder, true),
            info("head_b".into(), ParamGroup::Encoder, false),
            info("prototypes".into(), ParamGroup::Prototypes, false),
            info("predictor.w1".into(), ParamGroup::Predictor, true),
            info("predictor.b1".into(), ParamGroup::Predictor, false),
            info("predictor.w2".into(), ParamGroup::Predictor, true),
            info("predictor.b2".into(), ParamGroup::Predictor, false),
        ]);
        out
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ParamSet<Q> {
        let block = |b: &BlockParams<P>, f: &mut dyn FnMut(&P) -> Q| BlockParams {
            ln1_gamma: f(&b.ln1_gamma),
            ln1_beta: f(&b.ln1_beta),
            w_qkv: f(&b.w_qkv),
            b_qkv: f(&b.b_qkv),
            w_out: f(&b.w_out),
            b_out: f(&b.b_out),
            ln2_gamma: f(&b.ln2_gamma),
            ln2_beta: f(&b.ln2_beta),
            w_fc: f(&b.w_fc),
            b_fc: f(&b.b_fc),
            w_proj: f(&b.w_proj),
            b_proj: f(&b.b_proj),
        };
        ParamSet {
            proj_w: f(&self.proj_w),
            proj_b: f(&self.proj_b),
            pos_emb: f(&self.pos_emb),
            blocks: self.blocks.iter().map(|b| block(b, &mut f)).collect(),
            ln_f_gamma: f(&self.ln_f_gamma),
            ln_f_beta: f(&self.ln_f_beta),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
            prototypes: PrototypeBank {
                p: f(&self.prototypes.p),
                frozen: self.prototypes.frozen,
            },
            predictor: MlpParams {
                w1: f(&self.predictor.w1),
                b1: f(&self.predictor.b1),
                w2: f(&self.predictor.w2),
                b2: f(&self.predictor.b2),
            },
        }
    }
}

impl BlockParams<Var> {
    pub fn attention(&self) -> AttentionVars {
        AttentionVars {
            w_qkv: self.w_qkv,
            b_qkv: self.b_qkv,
            w_out: self.w_out,
            b_out: self.b_out,
        }
    }
}

/// All learnable state of the model together with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F = f64> {
    pub config: ModelConfig,
    pub weights: ParamSet<Tensor<F>>,
}

pub type ParamVars = ParamSet<Var>;

impl ModelParams<f64> {
    /// Seeded initialisation: weight matrices, positional table and
    /// prototypes drawn from N(0, 0.02²); biases zero; norm gains one.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut randn = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape, data).expect("shape matches")
        };
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let ones = |n: usize| Tensor::full(&[n], 1.0);
        let (d, h) = (cfg.d, cfg.predictor_hidden);

        let proj_w = randn(&[cfg.d_enc, d]);
        let pos_emb = randn(&[cfg.t_max, d]);
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockParams {
                ln1_gamma: ones(d),
                ln1_beta: zeros(d),
                w_qkv: randn(&[d, 3 * d]),
                b_qkv: zeros(3 * d),
                w_out: randn(&[d, d]),
                b_out: zeros(d),
                ln2_gamma: ones(d),
                ln2_beta: zeros(d),
                w_fc: randn(&[d, 4 * d]),
                b_fc: zeros(4 * d),
                w_proj: randn(&[4 * d, d]),
                b_proj: zeros(d),
            })
            .collect();
        let head_w = randn(&[d, cfg.k_classes]);
        let prototypes = randn(&[cfg.k_classes, d]);
        let w1 = randn(&[d, h]);
        let w2 = randn(&[h, d]);
        let weights = ParamSet {
            proj_w,
            proj_b: zeros(d),
            pos_emb,
            blocks,
            ln_f_gamma: ones(d),
            ln_f_beta: zeros(d),
            head_w,
            head_b: zeros(cfg.k_classes),
            prototypes: PrototypeBank { p: prototypes, frozen: false },
            predictor: MlpParams { w1, b1: zeros(h), w2, b2: zeros(d) },
        };
        Ok(Self { config: cfg.clone(), weights })
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        self.weights.map(|t| tape.param(t))
    }
}

impl<F: Float> ModelParams<F> {
    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            weights: self.weights.map(|t| t.cast()),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }
}
