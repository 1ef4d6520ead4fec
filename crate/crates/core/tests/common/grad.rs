//! Gradient-check cases shared by the gradient tests and the acceptance
//! suite.

use earlyvit::diffcore::{Tape, Tensor, Var};
use earlyvit::losses::*;
use earlyvit::model::{ForwardOutputs, ParamVars};

use super::*;

pub const SEEDS: std::ops::Range<u64> = 0..10;
pub const TOL: f64 = 1e-4;

/// Central differences over every input coordinate.
pub fn primitive_fd<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t)).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(inputs);
    let grads = tape.backward(out).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|j| {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let (tp, _, op) = eval(&plus);
                let (tm, _, om) = eval(&minus);
                (tp.value(op).item() - tm.value(om).item()) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Contracts a tensor output to a scalar with fixed random weights.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let w = randn(&mut rng(seed ^ 0xff), tape.value(y).shape());
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub fn primitives(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut r = rng(seed);
    let mut t = |shape: &[usize]| randn(&mut r, shape);
    vec![
        (
            "linear",
            vec![t(&[3, 4]), t(&[4, 5]), t(&[5])],
            Box::new(move |tp, v| {
                let y = tp.linear(v[0], v[1], Some(v[2])).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "add",
            vec![t(&[2, 3]), t(&[2, 3])],
            Box::new(move |tp, v| {
                let y = tp.add(v[0], v[1]).unwrap();
                let y = tp.mul(y, y).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "mul",
            vec![t(&[2, 3]), t(&[2, 3])],
            Box::new(move |tp, v| {
                let y = tp.mul(v[0], v[1]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "scale",
            vec![t(&[4])],
            Box::new(move |tp, v| {
                let y = tp.scale(v[0], -1.7);
                let y = tp.mul(y, v[0]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "sum",
            vec![t(&[3, 2])],
            Box::new(move |tp, v| {
                let y = tp.mul(v[0], v[0]).unwrap();
                tp.sum(y)
            }),
        ),
        (
            "mean",
            vec![t(&[3, 2])],
            Box::new(move |tp, v| {
                let y = tp.gelu(v[0]);
                tp.mean(y)
            }),
        ),
        (
            "gelu",
            vec![t(&[3, 4])],
            Box::new(move |tp, v| {
                let y = tp.gelu(v[0]);
                project(tp, y, seed)
            }),
        ),
        (
            "layer_norm",
            vec![t(&[3, 5]), t(&[5]), t(&[5])],
            Box::new(move |tp, v| {
                let y = tp.layer_norm(v[0], v[1], v[2]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "softmax_rows",
            vec![t(&[3, 4])],
            Box::new(move |tp, v| {
                let y = tp.softmax(v[0], 1).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "softmax_cols",
            vec![t(&[3, 4])],
            Box::new(move |tp, v| {
                let y = tp.softmax(v[0], 0).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "causal_attention",
            vec![t(&[5, 12])],
            Box::new(move |tp, v| {
                let y = tp.causal_attention(v[0], 2).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "neg_l2",
            vec![t(&[3, 4]), t(&[5, 4])],
            Box::new(move |tp, v| {
                let y = tp.neg_l2_scores(v[0], v[1]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "cross_entropy",
            vec![t(&[4, 5])],
            Box::new(move |tp, v| tp.cross_entropy(v[0], (seed % 5) as usize, 0.1).unwrap()),
        ),
        (
            "mse",
            vec![t(&[3, 4]), t(&[3, 4])],
            Box::new(move |tp, v| tp.mse(v[0], v[1]).unwrap()),
        ),
        (
            "slice_rows",
            vec![t(&[5, 3])],
            Box::new(move |tp, v| {
                let y = tp.slice_rows(v[0], 1, 4).unwrap();
                let y = tp.gelu(y);
                project(tp, y, seed)
            }),
        ),
    ]
}

pub type LossFn = Box<dyn Fn(&mut Tape, &ForwardOutputs, &ParamVars) -> Var>;

fn cfg_with(mode: TemporalMode, reg: RegMode) -> LossConfig {
    LossConfig { mode_temporal: mode, reg_mode: reg, e_star: 3, alpha: 0.8, ..LossConfig::default() }
}

/// Values the oracles hold fixed where the model detaches: the decoder
/// features and the prototype bank at the evaluation point.
#[derive(Clone)]
pub struct Frozen {
    pub z: Tensor,
    pub prototypes: Tensor,
}

fn rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    let d = t.cols();
    Tensor::new(&[end - start, d], t.data()[start * d..end * d].to_vec()).unwrap()
}

fn proto_oracle(tp: &mut Tape, v: &ParamVars, f: &Frozen, y: usize) -> Var {
    let t = f.z.rows();
    let z_last = tp.constant(rows(&f.z, t - 1, t));
    let s = tp.neg_l2_scores(z_last, v.prototypes.p).unwrap();
    tp.cross_entropy(s, y, 0.0).unwrap()
}

fn reg_proto_oracle(tp: &mut Tape, o: &ForwardOutputs, f: &Frozen, y: usize) -> Var {
    let p = tp.constant(f.prototypes.clone());
    let s = tp.neg_l2_scores(o.predicted, p).unwrap();
    tp.cross_entropy(s, y, 0.0).unwrap()
}

/// `(name, loss, oracle)`: the tape gradient of `loss` must match central
/// differences of `oracle` for every parameter tensor.
pub fn loss_cases(y: usize, t: usize, frozen: &Frozen) -> Vec<(&'static str, LossFn, LossFn)> {
    let same = |f: fn(&mut Tape, &ForwardOutputs, usize) -> Var| -> (LossFn, LossFn) {
        (Box::new(move |tp, o, _| f(tp, o, y)), Box::new(move |tp, o, _| f(tp, o, y)))
    };
    let mid = t.div_ceil(2);
    let mut cases: Vec<(&'static str, LossFn, LossFn)> = Vec::new();
    let mut push = |name, (a, b): (LossFn, LossFn)| cases.push((name, a, b));
    push("l_clf(t=1)", same(|tp, o, y| loss_clf(tp, o, y, 1, 0.1).unwrap()));
    push(
        "l_clf(t=mid)",
        (
            Box::new(move |tp, o, _| loss_clf(tp, o, y, mid, 0.1).unwrap()),
            Box::new(move |tp, o, _| loss_clf(tp, o, y, mid, 0.1).unwrap()),
        ),
    );
    push("l_ol", same(|tp, o, y| loss_ol(tp, o, y, 0.1).unwrap()));
    push("l_all", same(|tp, o, y| loss_all(tp, o, y, 0.1).unwrap()));
    push(
        "l_dyn hard (e <= e*)",
        same(|tp, o, y| loss_dyn(tp, o, y, 2, &cfg_with(TemporalMode::DynamicHard, RegMode::None)).unwrap()),
    );
    push(
        "l_dyn hard (e > e*)",
        same(|tp, o, y| loss_dyn(tp, o, y, 4, &cfg_with(TemporalMode::DynamicHard, RegMode::None)).unwrap()),
    );
    push(
        "l_dyn soft",
        same(|tp, o, y| loss_dyn(tp, o, y, 4, &cfg_with(TemporalMode::DynamicSoft, RegMode::None)).unwrap()),
    );
    let f = frozen.clone();
    push(
        "l_proto",
        (Box::new(move |tp, o, _| loss_proto(tp, o, y).unwrap()), Box::new(move |tp, _, v| proto_oracle(tp, v, &f, y))),
    );
    let f = frozen.clone();
    push(
        "l_reg prototypes",
        (
            Box::new(move |tp, o, _| loss_reg(tp, o, y, RegMode::Prototypes).unwrap()),
            Box::new(move |tp, o, _| reg_proto_oracle(tp, o, &f, y)),
        ),
    );
    let next = rows(&frozen.z, 1, t);
    push(
        "l_reg pred_next",
        (
            Box::new(move |tp, o, _| loss_reg(tp, o, y, RegMode::PredNext).unwrap()),
            Box::new(move |tp, o, _| {
                let pred = tp.slice_rows(o.predicted, 0, t - 1).unwrap();
                let target = tp.constant(next.clone());
                tp.mse(pred, target).unwrap()
            }),
        ),
    );
    let last = rows(&frozen.z, t - 1, t).data().repeat(t);
    let d = frozen.z.cols();
    push(
        "l_reg pred_final",
        (
            Box::new(move |tp, o, _| loss_reg(tp, o, y, RegMode::PredFinal).unwrap()),
            Box::new(move |tp, o, _| {
                let target = tp.constant(Tensor::new(&[t, d], last.clone()).unwrap());
                tp.mse(o.predicted, target).unwrap()
            }),
        ),
    );
    push("l_reg none", same(|tp, o, y| loss_reg(tp, o, y, RegMode::None).unwrap()));
    let f = frozen.clone();
    let cfg = cfg_with(TemporalMode::DynamicSoft, RegMode::Prototypes);
    let cfg2 = cfg.clone();
    push(
        "l_tot",
        (
            Box::new(move |tp, o, _| loss_total(tp, o, y, 4, &cfg).unwrap().l_tot),
            Box::new(move |tp, o, v| {
                let dynamic = loss_dyn(tp, o, y, 4, &cfg2).unwrap();
                let proto = proto_oracle(tp, v, &f, y);
                let reg = reg_proto_oracle(tp, o, &f, y);
                let s = tp.add(dynamic, proto).unwrap();
                tp.add(s, reg).unwrap()
            }),
        ),
    );
    cases
}

/// Worst error of each primitive over all seeds.
pub fn primitive_suite() -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in SEEDS {
        for (i, (name, inputs, build)) in primitives(seed).into_iter().enumerate() {
            let err = primitive_fd(&inputs, build);
            if worst.len() <= i {
                worst.push((name, err));
            } else {
                worst[i].1 = worst[i].1.max(err);
            }
        }
    }
    worst
}

/// Worst error of each loss term over all seeds.
pub fn loss_suite() -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in SEEDS {
        let cfg = tiny_config(seed);
        let p = lively(&cfg, 0.3);
        let t = 3 + (seed as usize % 4);
        let x = randn(&mut rng(seed + 100), &[t, cfg.d_enc]);
        let y = seed as usize % cfg.k_classes;
        let frozen = Frozen { z: decoder_z(&p, &x), prototypes: p.weights.prototypes.p.clone() };
        for (i, (name, loss, oracle)) in loss_cases(y, t, &frozen).into_iter().enumerate() {
            let err = model_fd_error(&p, &x, &loss, &oracle, 6, seed);
            if worst.len() <= i {
                worst.push((name, err));
            } else {
                worst[i].1 = worst[i].1.max(err);
            }
        }
    }
    worst
}
