//! Run directories behind the command-line subcommands. Every entry point
//! echoes its fully resolved configuration next to its outputs.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{audit_all_subsets, summarize, AuditOptions, AuditSummary, VectorKind};
use crate::data::{generate_dataset, read_json, write_json, Dataset, DatasetMeta, Observations, Seeds};
use crate::density::{check_lemma_sink, markov_network_from_density, model_grid, DerivMethod, LemmaReport};
use crate::driver::{fit, DriverConfig};
use crate::eval::{align, mixing_check, scatter_export, structure_report, subsample, AlignmentResult, MixingOptions, MixingRow, StructureReport};
use crate::graph::{Dag, UGraph};
use crate::model::{write_history_csv, CrlModel, ModelConfig, TrainConfig};
use crate::rng::derive_seed;
use crate::scm::{sample_sem, MixingSpec, ModelClass, SemConfig, SemSpec};
use crate::{CoreError, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

/// Built-in graphs, or a path to a graph JSON file.
pub fn resolve_graph(source: &str) -> Result<Dag> {
    match source {
        "chain3" => Ok(Dag::chain(3)),
        // Z1 → Z2 ← Z3.
        "collider3" => Ok(Dag::collider3()),
        // Z1 → Z3 ← Z2.
        "pair3" => Ok(Dag::pair3()),
        path => {
            let p = Path::new(path);
            if !p.exists() {
                return Err(CoreError::InvalidConfig(format!(
                    "unknown graph {path:?}: expected chain3, collider3, pair3 or a JSON file"
                )));
            }
            read_json(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixingConfig {
    /// Observed dimension; defaults to the number of latents.
    pub d: Option<usize>,
    pub depth: usize,
    pub slope: f64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            d: None,
            depth: 2,
            slope: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub graph: String,
    pub model: ModelClass,
    pub envs: usize,
    pub samples: usize,
    pub seed: u64,
    pub sem: SemConfig,
    pub mixing: MixingConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            graph: "chain3".into(),
            model: ModelClass::Anm,
            envs: 14,
            samples: 5000,
            seed: 0,
            sem: SemConfig::default(),
            mixing: MixingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResolved {
    pub config: GenConfig,
    pub dag: Dag,
    pub seeds: Seeds,
}

pub fn gen(cfg: &GenConfig, out: &Path) -> Result<Dataset> {
    if cfg.envs == 0 {
        return Err(CoreError::InvalidConfig("--envs must be at least 1".into()));
    }
    let dag = resolve_graph(&cfg.graph)?;
    let mut cfg = cfg.clone();
    let d = cfg.mixing.d.unwrap_or(dag.n());
    cfg.mixing.d = Some(d);
    let seeds = Seeds {
        sem: Some(derive_seed(cfg.seed, "sem")),
        mixing: Some(derive_seed(cfg.seed, "mixing")),
        samples: derive_seed(cfg.seed, "samples"),
    };
    let sem = sample_sem(&dag, cfg.envs, cfg.model, &cfg.sem, seeds.sem.unwrap())?;
    let mixing = MixingSpec::sample(dag.n(), d, cfg.mixing.depth, cfg.mixing.slope, seeds.mixing.unwrap())?;
    let ds = generate_dataset(&sem, &mixing, cfg.samples, seeds)?;
    ds.write(out)?;
    write_json(&out.join(RESOLVED_CONFIG), &GenResolved { config: cfg, dag, seeds })?;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckWhat {
    Lemmas,
    Markov,
    Assumptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckConfig {
    pub what: CheckWhat,
    /// Vector kind for the assumption audit; both kinds for the model class
    /// when absent.
    pub kind: Option<VectorKind>,
    pub method: DerivMethod,
    /// Probe points per environment.
    pub points: usize,
    /// Zero threshold; 1e-8 for analytic derivatives, 1e-4 otherwise.
    pub tolerance: Option<f64>,
    pub svd_tol: f64,
    pub both_orderings: bool,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            what: CheckWhat::Lemmas,
            kind: None,
            method: DerivMethod::Analytic,
            points: 25,
            tolerance: None,
            svd_tol: 1e-8,
            both_orderings: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovReport {
    pub dag: Dag,
    pub markov: UGraph,
    pub moral: UGraph,
    pub equals_moral: bool,
    pub subgraph_of_moral: bool,
    pub triangles: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum CheckResult {
    Lemmas(LemmaReport),
    Markov(MarkovReport),
    Assumptions(AuditSummary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub config: CheckConfig,
    pub spec_digest: String,
    pub pass: bool,
    pub result: CheckResult,
}

/// Runs a density or audit check on the generating process stored in a
/// dataset directory. A failing check is a result, not an error.
pub fn check(spec_dir: &Path, cfg: &CheckConfig, out: &Path) -> Result<CheckReport> {
    let spec: SemSpec = read_json(&spec_dir.join("sem.json"))?;
    let mut cfg = cfg.clone();
    let tol = *cfg.tolerance.get_or_insert(match cfg.method {
        DerivMethod::Analytic => 1e-8,
        DerivMethod::FiniteDiff { .. } => 1e-4,
    });
    let envs: Vec<usize> = (0..spec.m()).collect();
    let mut grid = Vec::new();
    for &u in &envs {
        grid.extend(model_grid(&spec, u, cfg.points, derive_seed(cfg.seed, &format!("grid-{u}")))?);
    }
    let result = match cfg.what {
        CheckWhat::Lemmas => CheckResult::Lemmas(check_lemma_sink(&spec, &envs, &grid, cfg.method, tol)?),
        CheckWhat::Markov => {
            let markov = markov_network_from_density(&spec, &envs, &grid, cfg.method, tol)?;
            let moral = spec.graph.moralize();
            CheckResult::Markov(MarkovReport {
                dag: spec.graph.clone(),
                equals_moral: markov == moral,
                subgraph_of_moral: markov.is_subgraph_of(&moral),
                triangles: markov.triangles(),
                markov,
                moral,
            })
        }
        CheckWhat::Assumptions => {
            let kinds = match (cfg.kind, spec.model_class) {
                (Some(k), _) => vec![k],
                (None, ModelClass::Anm) => vec![VectorKind::Tau, VectorKind::WAnm],
                (None, ModelClass::Hnm) => vec![VectorKind::Tau, VectorKind::WHnm],
            };
            let opts = AuditOptions {
                svd_tol: cfg.svd_tol,
                both_orderings: cfg.both_orderings,
                method: cfg.method,
            };
            let points = model_grid(&spec, 0, cfg.points, derive_seed(cfg.seed, "audit"))?;
            let reports = audit_all_subsets(&spec, &envs, &points, &kinds, &opts)?;
            CheckResult::Assumptions(summarize(&spec, &envs, reports, cfg.both_orderings))
        }
    };
    let pass = match &result {
        CheckResult::Lemmas(r) => r.pass,
        CheckResult::Markov(r) => r.equals_moral,
        CheckResult::Assumptions(r) => r.pass,
    };
    let report = CheckReport {
        config: cfg,
        spec_digest: spec.digest(),
        pass,
        result,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(out, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    /// Number of latents to fit; the dataset's own count when absent.
    pub nlatent: Option<usize>,
    /// `n`, `d` and `m` are filled in from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cold_start: bool,
    /// Rows per environment used for the reported final ELBO.
    pub elbo_rows: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            nlatent: None,
            model: ModelConfig::new(0, 0, 0),
            train: TrainConfig::default(),
            cold_start: false,
            elbo_rows: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResolved {
    pub data: String,
    pub config: TrainRunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub n: usize,
    pub lambda1: f64,
    pub seed: u64,
    pub final_elbo: f64,
    pub edges: usize,
    pub graph: Dag,
    pub iterations: usize,
}

pub fn iter_dir(run: &Path, t: usize) -> std::path::PathBuf {
    run.join(format!("iter_{t}"))
}

/// Trains on a dataset directory and writes per-iteration models and
/// histories, the final graph, encoder means and a summary.
pub fn train_run(data: &Path, cfg: &TrainRunConfig, out: &Path) -> Result<TrainSummary> {
    let meta: DatasetMeta = read_json(&data.join("meta.json"))?;
    let obs = Observations::load(data)?;
    if obs.m() < 2 {
        return Err(CoreError::InvalidConfig("training needs at least two environments".into()));
    }
    let mut cfg = cfg.clone();
    cfg.model.n = cfg.nlatent.unwrap_or(meta.n);
    cfg.model.d = obs.d;
    cfg.model.m = obs.m();
    cfg.model.validate()?;
    cfg.train.validate()?;
    fs::create_dir_all(out)?;
    write_json(
        &out.join(RESOLVED_CONFIG),
        &TrainResolved {
            data: data.display().to_string(),
            config: cfg.clone(),
        },
    )?;
    let driver = DriverConfig {
        train: cfg.train.clone(),
        cold_start: cfg.cold_start,
    };
    let run = fit(cfg.model.clone(), &obs, &driver)?;
    for log in &run.iterations {
        let dir = iter_dir(out, log.t);
        log.model.save(&dir)?;
        write_history_csv(&dir.join("history.csv"), &log.history)?;
    }
    write_json(&out.join("graph.json"), &run.graph)?;
    write_zhat(&run.model, &obs, &out.join("zhat.csv"))?;
    let summary = TrainSummary {
        n: cfg.model.n,
        lambda1: cfg.train.lambda1,
        seed: cfg.train.seed,
        final_elbo: run.model.final_elbo(&obs, cfg.elbo_rows, cfg.train.seed)?,
        edges: run.graph.edge_count(),
        graph: run.graph.clone(),
        iterations: run.iterations.len(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Encoder means for every sample, preceded by its environment index.
fn write_zhat(model: &CrlModel, obs: &Observations, path: &Path) -> Result<()> {
    let n = model.n();
    let mut out = Vec::new();
    write!(out, "env")?;
    for i in 0..n {
        write!(out, ",zhat_{i}")?;
    }
    out.push(b'\n');
    for (u, x) in obs.envs.iter().enumerate() {
        let z = model.encode_means(x)?;
        for row in z.data().chunks(n) {
            write!(out, "{u}")?;
            for v in row {
                write!(out, ",{v:.16e}")?;
            }
            out.push(b'\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Model of the last iteration of a training run.
pub fn load_final_model(run: &Path) -> Result<CrlModel> {
    let summary: TrainSummary = read_json(&run.join("summary.json"))?;
    CrlModel::load(&iter_dir(run, summary.iterations))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mixing: MixingOptions,
    /// Rows (evenly strided over all environments) in `scatter.csv`.
    pub scatter_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mixing: MixingOptions::default(),
            scatter_rows: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub true_graph: Dag,
    pub estimated_graph: Dag,
    pub alignment: AlignmentResult,
    pub structure: StructureReport,
    pub mixing: Vec<MixingRow>,
    /// The mixing thresholds are conventions for a qualitative claim.
    pub note: String,
}

pub fn eval_run(run: &Path, data: &Path, cfg: &EvalConfig, out: &Path) -> Result<EvalReport> {
    let model = load_final_model(run)?;
    let ds = Dataset::load(data)?;
    if model.n() != ds.meta.n {
        return Err(CoreError::DimensionMismatch(format!(
            "run has {} latents, data has {}",
            model.n(),
            ds.meta.n
        )));
    }
    if model.config.d != ds.meta.d || model.config.m != ds.meta.m {
        return Err(CoreError::DimensionMismatch("run and data disagree on d or m".into()));
    }
    let zhat = model.encode_means(&ds.observations().stacked())?;
    let z = ds.stacked_latents();
    let alignment = align(&zhat, &z)?;
    let perm = alignment.node_permutation();
    let estimated_graph = model.read_graph(model.config.threshold);
    let structure = structure_report(&estimated_graph, &ds.meta.graph, &perm)?;
    let mixing = mixing_check(&zhat, &z, &ds.meta.graph, &perm, &cfg.mixing)?;
    fs::create_dir_all(out)?;
    scatter_export(
        &subsample(&zhat, cfg.scatter_rows),
        &subsample(&z, cfg.scatter_rows),
        &perm,
        &out.join("scatter.csv"),
    )?;
    let report = EvalReport {
        config: cfg.clone(),
        true_graph: ds.meta.graph.clone(),
        estimated_graph,
        alignment,
        structure,
        mixing,
        note: "R2 thresholds for mixing support are acceptance conventions".into(),
    };
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda1,
    Nlatent,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Nlatent => "nlatent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: TrainRunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub final_elbo: f64,
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepValueSummary {
    pub value: f64,
    pub median_final_elbo: f64,
    pub median_edges: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepValueSummary>,
    /// Value with the lowest median final negative ELBO.
    pub best_value: f64,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// One training run per (value, seed), at most `threads` at a time, each in
/// `<out>/<param>_<value>/seed_<s>`. Writes `sweep.csv` and `sweep.json`.
pub fn sweep(data: &Path, cfg: &SweepConfig, out: &Path, threads: usize) -> Result<SweepReport> {
    if cfg.values.is_empty() || cfg.seeds.is_empty() {
        return Err(CoreError::InvalidConfig("sweep needs at least one value and one seed".into()));
    }
    let mut jobs = Vec::new();
    for &value in &cfg.values {
        let mut run = cfg.base.clone();
        match cfg.param {
            SweepParam::Lambda1 => run.train.lambda1 = value,
            SweepParam::Nlatent => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(CoreError::InvalidConfig(format!("latent count {value} is not a positive integer")));
                }
                run.nlatent = Some(value as usize);
            }
        }
        for &seed in &cfg.seeds {
            let mut r = run.clone();
            r.train.seed = seed;
            let dir = out.join(format!("{}_{value}", cfg.param.name())).join(format!("seed_{seed}"));
            jobs.push((value, seed, r, dir));
        }
    }
    fs::create_dir_all(out)?;
    write_json(&out.join(RESOLVED_CONFIG), cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CoreError::InvalidConfig(e.to_string()))?;
    let rows = pool.install(|| {
        jobs.par_iter()
            .map(|(value, seed, r, dir)| {
                let s = train_run(data, r, dir)?;
                Ok(SweepRow {
                    value: *value,
                    seed: *seed,
                    final_elbo: s.final_elbo,
                    edges: s.edges,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let summary: Vec<SweepValueSummary> = cfg
        .values
        .iter()
        .map(|&value| {
            let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.value == value).collect();
            SweepValueSummary {
                value,
                median_final_elbo: median(&mine.iter().map(|r| r.final_elbo).collect::<Vec<_>>()),
                median_edges: median(&mine.iter().map(|r| r.edges as f64).collect::<Vec<_>>()),
            }
        })
        .collect();
    let best_value = summary
        .iter()
        .min_by(|a, b| a.median_final_elbo.total_cmp(&b.median_final_elbo))
        .map(|s| s.value)
        .expect("nonempty");
    let mut csv = String::from("param,value,seed,final_elbo,edges\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{:.16e},{}\n", cfg.param.name(), r.value, r.seed, r.final_elbo, r.edges));
    }
    fs::write(out.join("sweep.csv"), csv)?;
    let report = SweepReport {
        param: cfg.param,
        rows,
        summary,
        best_value,
    };
    write_json(&out.join("sweep.json"), &report)?;
    Ok(report)
}
