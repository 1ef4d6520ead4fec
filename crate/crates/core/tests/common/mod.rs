#![allow(dead_code)]

pub mod grad;

use earlyvit::cli::RunConfig;
use earlyvit::dataio::{gen_synthetic, SynthSpec};
use earlyvit::diffcore::{Tape, Tensor, Var};
use earlyvit::losses::LossConfig;
use earlyvit::metrics::{auc, eval_curve};
use earlyvit::model::{forward_full, ForwardOutputs, ModelConfig, ModelParams, ParamGroup, ParamVars};
use earlyvit::trainer::{fit, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// T <= 6, K <= 5, d <= 16.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig { d_enc: 4, d: 8, n_blocks: 1, n_heads: 2, t_max: 6, k_classes: 4, predictor_hidden: 8, seed }
}

/// Initialised parameters with extra noise so that every nonlinearity sees
/// inputs of order one.
pub fn lively(cfg: &ModelConfig, scale: f64) -> ModelParams {
    let mut p = ModelParams::init(cfg).unwrap();
    let mut r = rng(cfg.seed ^ 0x5eed);
    for t in p.weights.iter_mut() {
        for v in t.data_mut() {
            let n: f64 = StandardNormal.sample(&mut r);
            *v += scale * n;
        }
    }
    p
}

/// Evaluates `loss` with every parameter on a fresh tape.
pub fn loss_value<L>(p: &ModelParams, x: &Tensor, loss: &L) -> f64
where
    L: Fn(&mut Tape, &ForwardOutputs, &ParamVars) -> Var,
{
    let mut tape = Tape::new();
    let vars = p.register(&mut tape);
    let out = forward_full(&mut tape, &vars, &p.config, x).unwrap();
    let l = loss(&mut tape, &out, &vars);
    tape.value(l).item()
}

/// Decoder features `[T, d]` of one forward pass.
pub fn decoder_z(p: &ModelParams, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape);
    let out = forward_full(&mut tape, &vars, &p.config, x).unwrap();
    tape.value(out.z).clone()
}

/// Tape gradient of `loss` for every parameter tensor, in declaration order.
pub fn loss_grads<L>(p: &ModelParams, x: &Tensor, loss: &L) -> Vec<Vec<f64>>
where
    L: Fn(&mut Tape, &ForwardOutputs, &ParamVars) -> Var,
{
    let mut tape = Tape::new();
    let vars = p.register(&mut tape);
    let out = forward_full(&mut tape, &vars, &p.config, x).unwrap();
    let l = loss(&mut tape, &out, &vars);
    let g = tape.backward(l).unwrap();
    vars.iter().map(|v| g.get_or_zeros(*v)).collect()
}

/// Norm-relative error between two gradient vectors; vectors that are both
/// below 1e-10 in norm count as agreeing.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst per-tensor error between the tape gradient of `loss` and central
/// differences of `oracle`, probing up to `per_tensor` coordinates of each
/// parameter tensor. `oracle` is `loss` with every stop-gradient input
/// replaced by a constant holding its current value.
pub fn model_fd_error<L, O>(p: &ModelParams, x: &Tensor, loss: &L, oracle: &O, per_tensor: usize, seed: u64) -> f64
where
    L: Fn(&mut Tape, &ForwardOutputs, &ParamVars) -> Var,
    O: Fn(&mut Tape, &ForwardOutputs, &ParamVars) -> Var,
{
    let analytic = loss_grads(p, x, loss);
    let h = 1e-5;
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let n_tensors = analytic.len();
    for i in 0..n_tensors {
        let len = analytic[i].len();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut r, len, per_tensor).into_vec()
        };
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &j in &coords {
            let mut plus = p.clone();
            plus.weights.iter_mut().nth(i).unwrap().data_mut()[j] += h;
            let mut minus = p.clone();
            minus.weights.iter_mut().nth(i).unwrap().data_mut()[j] -= h;
            let fd = (loss_value(&plus, x, oracle) - loss_value(&minus, x, oracle)) / (2.0 * h);
            a.push(analytic[i][j]);
            n.push(fd);
        }
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

/// Per-group flags: does any tensor of the group receive a nonzero
/// gradient entry.
pub fn group_flow(p: &ModelParams, grads: &[Vec<f64>]) -> [(ParamGroup, bool); 3] {
    let infos = p.weights.infos();
    let mut flags = [(ParamGroup::Encoder, false), (ParamGroup::Predictor, false), (ParamGroup::Prototypes, false)];
    for (info, g) in infos.iter().zip(grads) {
        let nonzero = g.iter().any(|&v| v != 0.0);
        for f in flags.iter_mut() {
            if f.0 == info.group {
                f.1 |= nonzero;
            }
        }
    }
    flags
}

/// The benchmark preset shipped with the repository.
pub fn benchmark() -> RunConfig {
    serde_json::from_str(include_str!("../../../../configs/benchmark.json")).unwrap()
}

pub struct BenchRun {
    /// AUC of the parameters after the last epoch.
    pub auc: f64,
    /// Full-observation accuracy of the same parameters.
    pub full_obs: f64,
    pub acc: Vec<f64>,
}

/// Generates the benchmark split for `seed`, trains the preset model with
/// `loss` and scores the final parameters on the validation split.
pub fn bench_run(rc: &RunConfig, seed: u64, loss: LossConfig) -> BenchRun {
    let data = gen_synthetic(&SynthSpec { seed, ..rc.synth.clone() }).unwrap();
    let model = ModelConfig {
        d_enc: data.train.d_enc,
        k_classes: data.train.k_classes,
        seed,
        ..rc.model.clone().unwrap_or_default()
    };
    let params = ModelParams::init(&model).unwrap();
    let cfg = TrainConfig { seed, loss, eval_every: 0, ..rc.train.clone() };
    let outcome = fit(params, &data.train, &data.val, &cfg).unwrap();
    let curve = eval_curve(&outcome.params, &data.val).unwrap();
    BenchRun { auc: auc(&curve).unwrap(), full_obs: curve.last().unwrap(), acc: curve.acc }
}

pub fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// One row of the gradient-flow matrix: loss name, observed nonzero flags
/// for (encoder side, predictor, prototypes), expected flags.
pub type FlowRow = (&'static str, [bool; 3], [bool; 3]);

/// Audits which parameter groups each loss reaches on a random small
/// model.
pub fn flow_matrix(seed: u64) -> Vec<FlowRow> {
    use earlyvit::losses::*;
    let cfg = tiny_config(seed);
    let p = lively(&cfg, 0.3);
    // T >= 2 so that pred_next has a target
    let t = 2 + seed as usize % 5;
    let x = randn(&mut rng(seed + 500), &[t, cfg.d_enc]);
    let y = seed as usize % cfg.k_classes;
    let dyn_cfg = |mode| LossConfig { mode_temporal: mode, e_star: 3, ..LossConfig::default() };
    type Case = (&'static str, Box<dyn Fn(&mut Tape, &ForwardOutputs, &ParamVars) -> Var>, [bool; 3]);
    let cases: Vec<Case> = vec![
        ("L_dyn only_last", Box::new(move |tp, o, _| loss_dyn(tp, o, y, 1, &dyn_cfg(TemporalMode::OnlyLast)).unwrap()), [true, false, false]),
        ("L_dyn all", Box::new(move |tp, o, _| loss_dyn(tp, o, y, 1, &dyn_cfg(TemporalMode::All)).unwrap()), [true, false, false]),
        ("L_dyn hard", Box::new(move |tp, o, _| loss_dyn(tp, o, y, 5, &dyn_cfg(TemporalMode::DynamicHard)).unwrap()), [true, false, false]),
        ("L_dyn soft", Box::new(move |tp, o, _| loss_dyn(tp, o, y, 5, &dyn_cfg(TemporalMode::DynamicSoft)).unwrap()), [true, false, false]),
        ("L_proto", Box::new(move |tp, o, _| loss_proto(tp, o, y).unwrap()), [false, false, true]),
        ("L_reg prototypes", Box::new(move |tp, o, _| loss_reg(tp, o, y, RegMode::Prototypes).unwrap()), [true, true, false]),
        ("L_reg pred_next", Box::new(move |tp, o, _| loss_reg(tp, o, y, RegMode::PredNext).unwrap()), [true, true, false]),
        ("L_reg pred_final", Box::new(move |tp, o, _| loss_reg(tp, o, y, RegMode::PredFinal).unwrap()), [true, true, false]),
        ("L_reg none", Box::new(move |tp, o, _| loss_reg(tp, o, y, RegMode::None).unwrap()), [false, false, false]),
        (
            "L_tot",
            Box::new(move |tp, o, _| loss_total(tp, o, y, 5, &LossConfig::default()).unwrap().l_tot),
            [true, true, true],
        ),
    ];
    cases
        .into_iter()
        .map(|(name, loss, expect)| {
            let g = loss_grads(&p, &x, &loss);
            let flow = group_flow(&p, &g);
            (name, [flow[0].1, flow[1].1, flow[2].1], expect)
        })
        .collect()
}
