//! Command line front end: `gen`, `train`, `eval`, `stream` and
//! `export-embeddings`.
//!
//! Settings resolve as flag > JSON config file (`--config`) > built-in
//! defaults. Exit codes: 0 success, 2 configuration or validation failure,
//! 3 numeric or capacity failure.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataio::{gen_synthetic, read_feature_file, write_feature_file, Dataset, SynthSpec};
use crate::diffcore::kernels::argmax;
use crate::error::{Error, Result};
use crate::losses::{RegMode, TemporalMode};
use crate::metrics::{auc, curve_to_csv, eval_curve, parse_curve_csv};
use crate::model::{
    embeddings_to_csv, ensure_matches, export_embeddings, forward_step, load_checkpoint, save_checkpoint,
    IncrementalState, ModelConfig, ModelParams,
};
use crate::trainer::{fit_with, TrainConfig};

/// Output and input locations; any of them may come from the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub out_dir: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a command may need, as read from a JSON config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Architecture. When given to `eval`, `stream` or `export-embeddings`
    /// it must match the checkpoint.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub paths: PathConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Parser)]
#[command(name = "earlyvit", version, about = "Early action recognition over segment features")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train/val feature files.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus a JSONL report.
    Train(TrainArgs),
    /// Accuracy per observation ratio and AUC, as CSV.
    Eval(EvalArgs),
    /// Online prediction, one line per incoming segment.
    Stream(StreamArgs),
    /// Prototype and final-feature vectors as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Directory receiving train.evpf and val.evpf.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub k_classes: Option<usize>,
    #[arg(long)]
    pub t_segments: Option<usize>,
    #[arg(long)]
    pub d_enc: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub ambiguity_depth: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub predictor_hidden: Option<usize>,
    /// Initialisation seed (defaults to the training seed).
    #[arg(long)]
    pub model_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Best-AUC checkpoint (final parameters when no validation ran).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Parameters after the last epoch.
    #[arg(long)]
    pub last_checkpoint: Option<PathBuf>,
    /// JSONL report, one object per epoch.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub e_star: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub no_grad_clip: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub loss: Option<TemporalMode>,
    #[arg(long, value_enum)]
    pub reg: Option<RegMode>,
    /// Drop the prototype-learning term.
    #[arg(long)]
    pub no_prototypes: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Skip the model and compute the AUC of a `rho,top1` CSV.
    #[arg(long)]
    pub curve_from_csv: Option<PathBuf>,
    /// Metrics CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Feature file holding the sample to replay.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Read comma-separated segment vectors from stdin instead.
    #[arg(long)]
    pub stdin: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn need(path: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| Error::config(format!("missing --{flag}")))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_gen(args: GenArgs, rc: RunConfig) -> Result<()> {
    let mut spec = rc.synth;
    set(&mut spec.k_classes, args.k_classes);
    set(&mut spec.t_segments, args.t_segments);
    set(&mut spec.d_enc, args.d_enc);
    set(&mut spec.noise_sigma, args.noise_sigma);
    set(&mut spec.ambiguity_depth, args.ambiguity_depth);
    set(&mut spec.n_train, args.n_train);
    set(&mut spec.n_val, args.n_val);
    set(&mut spec.seed, args.seed);
    let dir = need(args.out_dir, &rc.paths.out_dir, "out-dir")?;
    let data = gen_synthetic(&spec)?;
    fs::create_dir_all(&dir)?;
    write_feature_file(&data.train, &dir.join("train.evpf"))?;
    write_feature_file(&data.val, &dir.join("val.evpf"))?;
    println!(
        "wrote {} train / {} val records: K={} T={} d_enc={} ambiguity_depth={} noise_sigma={} seed={}",
        data.train.len(),
        data.val.len(),
        spec.k_classes,
        spec.t_segments,
        spec.d_enc,
        spec.ambiguity_depth,
        spec.noise_sigma,
        spec.seed
    );
    Ok(())
}

fn model_for(data: &Dataset, base: Option<ModelConfig>, args: &ModelArgs, seed: u64) -> Result<ModelConfig> {
    let mut cfg = base.unwrap_or_default();
    cfg.d_enc = data.d_enc;
    cfg.k_classes = data.k_classes;
    cfg.seed = seed;
    set(&mut cfg.d, args.d);
    set(&mut cfg.n_blocks, args.n_blocks);
    set(&mut cfg.n_heads, args.n_heads);
    set(&mut cfg.t_max, args.t_max);
    set(&mut cfg.predictor_hidden, args.predictor_hidden);
    set(&mut cfg.seed, args.model_seed);
    if let Some(t) = data.samples.iter().map(|s| s.segments()).max() {
        if t > cfg.t_max {
            return Err(Error::config(format!("data has {t} segments but t_max is {}", cfg.t_max)));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs, rc: RunConfig) -> Result<()> {
    let mut tc = rc.train;
    set(&mut tc.epochs, args.epochs);
    set(&mut tc.loss.e_star, args.e_star);
    set(&mut tc.batch_size, args.batch_size);
    set(&mut tc.lr, args.lr);
    set(&mut tc.weight_decay, args.weight_decay);
    if args.grad_clip.is_some() {
        tc.grad_clip = args.grad_clip;
    }
    if args.no_grad_clip {
        tc.grad_clip = None;
    }
    set(&mut tc.seed, args.seed);
    set(&mut tc.loss.mode_temporal, args.loss);
    set(&mut tc.loss.reg_mode, args.reg);
    set(&mut tc.loss.alpha, args.alpha);
    set(&mut tc.loss.epsilon_smooth, args.label_smoothing);
    set(&mut tc.eval_every, args.eval_every);
    if args.no_prototypes {
        tc.loss.use_prototypes = false;
    }
    tc.validate()?;

    let paths = &rc.paths;
    let train = read_feature_file(&need(args.train, &paths.train, "train")?)?;
    let val = match args.val.or_else(|| paths.val.clone()) {
        Some(p) => read_feature_file(&p)?,
        None => Dataset::new(train.k_classes, train.d_enc, Vec::new())?,
    };
    let checkpoint = need(args.checkpoint, &paths.checkpoint, "checkpoint")?;
    let report_path = args.report.or_else(|| paths.report.clone());
    let last = args.last_checkpoint.or_else(|| paths.last_checkpoint.clone());

    let model_seed = args.model.model_seed.unwrap_or(tc.seed);
    let mcfg = model_for(&train, rc.model, &args.model, model_seed)?;
    let params = ModelParams::init(&mcfg)?;
    if !args.quiet {
        eprintln!(
            "training {} parameters on {} samples for {} epochs (loss {:?}, e* = {}, reg {:?})",
            params.num_parameters(),
            train.len(),
            tc.epochs,
            tc.loss.mode_temporal,
            tc.loss.e_star,
            tc.loss.reg_mode
        );
    }
    let quiet = args.quiet;
    let outcome = fit_with(params, &train, &val, &tc, |e| {
        if !quiet {
            let auc = e.eval.as_ref().map_or(String::from("-"), |v| format!("{:.4}", v.auc));
            eprintln!(
                "epoch {:>3} [{}] l_tot {:.4} l_dyn {:.4} l_proto {:.4} l_reg {:.4} auc {} ({:.2}s)",
                e.epoch, e.regime, e.losses.l_tot, e.losses.l_dyn, e.losses.l_proto, e.losses.l_reg, auc, e.seconds
            );
        }
    })?;
    save_checkpoint(outcome.best_params(), &checkpoint)?;
    if let Some(p) = last {
        save_checkpoint(&outcome.params, &p)?;
    }
    if let Some(p) = report_path {
        fs::write(p, outcome.report.to_jsonl()?)?;
    }
    if let Some(e) = outcome.report.last_eval() {
        println!("final auc {:.6} full-observation top1 {:.6}", e.auc, e.acc.last().copied().unwrap_or(0.0));
    }
    Ok(())
}

fn load_matching(path: &Path, expected: &Option<ModelConfig>) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if let Some(m) = expected {
        ensure_matches(&params.config, m)?;
    }
    Ok(params)
}

fn check_data(params: &ModelParams, data: &Dataset) -> Result<()> {
    let c = &params.config;
    if data.d_enc != c.d_enc {
        return Err(Error::Mismatch { field: "d_enc", checkpoint: c.d_enc.to_string(), expected: data.d_enc.to_string() });
    }
    if data.k_classes != c.k_classes {
        return Err(Error::Mismatch {
            field: "k_classes",
            checkpoint: c.k_classes.to_string(),
            expected: data.k_classes.to_string(),
        });
    }
    if let Some(t) = data.samples.iter().map(|s| s.segments()).max() {
        if t > c.t_max {
            return Err(Error::Mismatch { field: "t_max", checkpoint: c.t_max.to_string(), expected: t.to_string() });
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, rc: RunConfig) -> Result<()> {
    let out = args.out.or_else(|| rc.paths.out.clone());
    let curve = match args.curve_from_csv {
        Some(p) => parse_curve_csv(&fs::read_to_string(p)?)?,
        None => {
            let params = load_matching(&need(args.checkpoint, &rc.paths.checkpoint, "checkpoint")?, &rc.model)?;
            let data = read_feature_file(&need(args.data, &rc.paths.data, "data")?)?;
            check_data(&params, &data)?;
            eval_curve(&params, &data)?
        }
    };
    let text = curve_to_csv(&curve)?;
    write_or_print(out.as_deref(), &text)?;
    if out.is_some() {
        eprintln!("auc {}", auc(&curve)?);
    }
    Ok(())
}

fn parse_segment(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|c| {
            c.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::config(format!("stdin line {lineno}: bad value `{}`", c.trim())))
        })
        .collect()
}

fn cmd_stream(args: StreamArgs, rc: RunConfig) -> Result<()> {
    let params = load_matching(&need(args.checkpoint, &rc.paths.checkpoint, "checkpoint")?, &rc.model)?;
    let d_enc = params.config.d_enc;
    let mut state = IncrementalState::new();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut emit = |state: &mut IncrementalState, seg: &[f64], total: usize| -> Result<()> {
        if seg.len() != d_enc {
            return Err(Error::dim("segment", &[seg.len()], &[d_enc]));
        }
        let probs = forward_step(&params, state, seg)?;
        let t = state.len();
        let top = argmax(&probs);
        writeln!(out, "{},{},{},{}", t, t as f64 / total as f64, top, probs[top])?;
        out.flush()?;
        Ok(())
    };
    if args.stdin {
        let total = params.config.t_max;
        for (i, line) in io::stdin().lock().lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let seg = parse_segment(&line, i + 1)?;
            emit(&mut state, &seg, total)?;
        }
    } else {
        let data = read_feature_file(&need(args.data, &rc.paths.data, "data")?)?;
        let sample = data
            .samples
            .get(args.index)
            .ok_or(Error::Index { what: "sample", index: args.index, len: data.len() })?;
        let total = sample.segments();
        for t in 0..total {
            emit(&mut state, sample.segment(t), total)?;
        }
    }
    Ok(())
}

fn cmd_export(args: ExportArgs, rc: RunConfig) -> Result<()> {
    let params = load_matching(&need(args.checkpoint, &rc.paths.checkpoint, "checkpoint")?, &rc.model)?;
    let data = read_feature_file(&need(args.data, &rc.paths.data, "data")?)?;
    check_data(&params, &data)?;
    let rows = export_embeddings(&params, &data.samples)?;
    let out = args.out.or_else(|| rc.paths.out.clone());
    write_or_print(out.as_deref(), &embeddings_to_csv(&rows, params.config.d))
}

pub fn run(cli: Cli) -> Result<()> {
    let rc = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Gen(a) => cmd_gen(a, rc),
        Command::Train(a) => cmd_train(a, rc),
        Command::Eval(a) => cmd_eval(a, rc),
        Command::Stream(a) => cmd_stream(a, rc),
        Command::ExportEmbeddings(a) => cmd_export(a, rc),
    }
}

/// Parses the process arguments, runs the command and returns the exit
/// code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
