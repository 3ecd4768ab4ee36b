use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crl_core::audit::VectorKind;
use crl_core::data::read_json;
use crl_core::density::DerivMethod;
use crl_core::pipeline::{
    self, CheckConfig, CheckWhat, EvalConfig, GenConfig, SweepConfig, SweepParam, TrainRunConfig,
};
use crl_core::scm::{Activation, ModelClass};
use crl_core::CoreError;

#[derive(Parser)]
#[command(name = "crl", version, about = "Causal representation learning from multiple environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a latent SEM, a mixing function and a multi-environment dataset.
    Gen(GenArgs),
    /// Density-derivative checks on the generating process of a dataset.
    Check(CheckArgs),
    /// Run the iterative sink-identification estimator on a dataset.
    Train(TrainArgs),
    /// Compare a trained run against the dataset's ground truth.
    Eval(EvalArgs),
    /// Repeat training across values of one parameter and seeds.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Anm,
    Hnm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Tanh,
    LeakyRelu,
}

#[derive(Args)]
struct GenArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// chain3, collider3, pair3 or a graph JSON file.
    #[arg(long)]
    graph: Option<String>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    envs: Option<usize>,
    /// Samples per environment.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Mechanism activation (leaky_relu uses slope 0.2).
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    /// Observed dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckArg {
    Lemmas,
    Markov,
    Assumptions,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Tau,
    WAnm,
    WHnm,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(value_enum)]
    what: CheckArg,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Use central differences with this step instead of exact derivatives.
    #[arg(long)]
    fd_step: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    nlatent: Option<usize>,
    /// Reinitialize the weights at every iteration.
    #[arg(long)]
    cold_start: bool,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainRunConfig) {
        if let Some(v) = self.lambda1 {
            cfg.train.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.train.lambda2 = v;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if self.nlatent.is_some() {
            cfg.nlatent = self.nlatent;
        }
        if self.cold_start {
            cfg.cold_start = true;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Lambda1,
    Nlatent,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: ParamArg,
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    data: PathBuf,
    /// Base training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    out: PathBuf,
}

fn load_or_default<T: Default + for<'de> serde::Deserialize<'de>>(path: &Option<PathBuf>) -> Result<T, CoreError> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn run_gen(a: &GenArgs) -> Result<(), CoreError> {
    let mut cfg: GenConfig = load_or_default(&a.config)?;
    if let Some(g) = &a.graph {
        cfg.graph = g.clone();
    }
    if let Some(m) = a.model {
        cfg.model = match m {
            ModelArg::Anm => ModelClass::Anm,
            ModelArg::Hnm => ModelClass::Hnm,
        };
    }
    if let Some(v) = a.envs {
        cfg.envs = v;
    }
    if let Some(v) = a.samples {
        cfg.samples = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(act) = a.activation {
        cfg.sem.activation = match act {
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::LeakyRelu => Activation::LeakyRelu { slope: 0.2 },
        };
    }
    if a.dim.is_some() {
        cfg.mixing.d = a.dim;
    }
    let ds = pipeline::gen(&cfg, &a.out)?;
    println!(
        "wrote {} environments x {} samples to {}",
        ds.meta.m,
        ds.meta.samples_per_env,
        a.out.display()
    );
    Ok(())
}

fn run_check(a: &CheckArgs) -> Result<(), CoreError> {
    let mut cfg: CheckConfig = load_or_default(&a.config)?;
    cfg.what = match a.what {
        CheckArg::Lemmas => CheckWhat::Lemmas,
        CheckArg::Markov => CheckWhat::Markov,
        CheckArg::Assumptions => CheckWhat::Assumptions,
    };
    if let Some(k) = a.kind {
        cfg.kind = Some(match k {
            KindArg::Tau => VectorKind::Tau,
            KindArg::WAnm => VectorKind::WAnm,
            KindArg::WHnm => VectorKind::WHnm,
        });
    }
    if let Some(h) = a.fd_step {
        cfg.method = DerivMethod::FiniteDiff { h };
    }
    if let Some(v) = a.points {
        cfg.points = v;
    }
    if a.tolerance.is_some() {
        cfg.tolerance = a.tolerance;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let report = pipeline::check(&a.spec, &cfg, &a.out)?;
    println!("{}: {}", a.out.display(), if report.pass { "PASS" } else { "FAIL" });
    Ok(())
}

fn train_config(config: &Option<PathBuf>, overrides: &TrainOverrides) -> Result<TrainRunConfig, CoreError> {
    let mut cfg: TrainRunConfig = load_or_default(config)?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn run_train(a: &TrainArgs) -> Result<(), CoreError> {
    let mut cfg = train_config(&a.config, &a.overrides)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let s = pipeline::train_run(&a.data, &cfg, &a.out)?;
    println!("graph: {}", s.graph);
    println!("final negative ELBO: {:.6}", s.final_elbo);
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<(), CoreError> {
    let cfg: EvalConfig = load_or_default(&a.config)?;
    let r = pipeline::eval_run(&a.run, &a.data, &cfg, &a.out)?;
    println!(
        "exact match: {}  shd: {}  aligned |spearman|: {:?}",
        r.structure.exact_match, r.structure.shd, r.alignment.aligned
    );
    Ok(())
}

fn threads() -> usize {
    std::env::var("CRL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&t: &usize| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_sweep(a: &SweepArgs) -> Result<(), CoreError> {
    let base = train_config(&a.config, &a.overrides)?;
    let cfg = SweepConfig {
        param: match a.param {
            ParamArg::Lambda1 => SweepParam::Lambda1,
            ParamArg::Nlatent => SweepParam::Nlatent,
        },
        values: a.values.clone(),
        seeds: a.seeds.clone(),
        base,
    };
    let r = pipeline::sweep(&a.data, &cfg, &a.out, threads())?;
    println!("{:>10} {:>16} {:>8}", cfg.param.name(), "median -ELBO", "edges");
    for s in &r.summary {
        println!("{:>10} {:>16.6} {:>8}", s.value, s.median_final_elbo, s.median_edges);
    }
    println!("lowest median -ELBO at {} = {}", cfg.param.name(), r.best_value);
    Ok(())
}

fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Io(_) | CoreError::Parse(_) | CoreError::Json(_) => 3,
        CoreError::UnsupportedProfile(_) => 4,
        CoreError::NumericalAbort { .. } => 5,
        _ => 2,
    }
}

fn hint(e: &CoreError) -> Option<&'static str> {
    match e {
        CoreError::UnsupportedProfile(_) => Some(
            "exact derivatives need smooth mechanisms: regenerate with `--activation tanh`, or pass `--fd-step` for finite differences",
        ),
        _ => None,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Check(a) => run_check(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(h) = hint(&e) {
                eprintln!("hint: {h}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
