//! Iterative sink identification: train, read the graph, move a sink of the
//! active block to the last active position, freeze its gates, repeat.

use serde::{Deserialize, Serialize};

use crate::data::Observations;
use crate::graph::Dag;
use crate::model::{CrlModel, HistoryRow, ModelConfig, MoralRef, TrainConfig};
use crate::rng::derive_seed;
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverConfig {
    pub train: TrainConfig,
    /// Reinitialize all weights at the start of every iteration.
    pub cold_start: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    /// 1-based.
    pub t: usize,
    pub graph_before: Dag,
    /// Position picked as sink, before relabeling.
    pub sink: usize,
    /// Relabeling applied: new position `k` holds old position `order[k]`.
    pub order: Vec<usize>,
    pub graph_after: Dag,
    pub history: Vec<HistoryRow>,
    /// Model state at the end of the iteration (after freezing).
    pub model: CrlModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub model: CrlModel,
    pub graph: Dag,
    pub iterations: Vec<IterationLog>,
}

/// Sink of the thresholded graph induced on `active`. Ties go to the node
/// with the least gate mass to and from other active nodes, then to the
/// lowest index.
pub fn pick_sink(model: &CrlModel, active: &[usize], threshold: f64) -> Result<usize> {
    let n = model.n();
    if active.is_empty() {
        return Err(CoreError::InvalidConfig("no active nodes".into()));
    }
    if let Some(&bad) = active.iter().find(|&&i| i >= n) {
        return Err(CoreError::InvalidNode { node: bad, n });
    }
    let g = model.read_graph(threshold);
    let a = model.gate_values();
    let mass = |i: usize| -> f64 {
        active
            .iter()
            .filter(|&&k| k != i)
            .map(|&k| a[k * n + i] + a[i * n + k])
            .sum()
    };
    let mut best: Option<(f64, usize)> = None;
    for &i in active {
        if active.iter().any(|&k| g.has_edge(i, k)) {
            continue;
        }
        let w = mass(i);
        let better = match best {
            None => true,
            Some((bw, bi)) => w < bw || (w == bw && i < bi),
        };
        if better {
            best = Some((w, i));
        }
    }
    let (_, i) = best.expect("a DAG restricted to any node set has a sink");
    Ok(i)
}

/// Order that moves position `p` to the end of the block `0..=last` and keeps
/// everything else in relative order.
pub fn rotation(n: usize, p: usize, last: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..=last).filter(|&k| k != p).collect();
    order.push(p);
    order.extend(last + 1..n);
    order
}

/// Runs `n − 1` iterations on `model`. With `n = 1` nothing is trained.
pub fn run_algorithm1(mut model: CrlModel, obs: &Observations, cfg: &DriverConfig) -> Result<RunResult> {
    let n = model.n();
    let thr = model.config.threshold;
    let mut iterations = Vec::new();
    let mut prev: Option<Vec<f64>> = None;
    for t in 1..n {
        let mut tc = cfg.train.clone();
        tc.seed = derive_seed(cfg.train.seed, &format!("iteration-{t}"));
        if cfg.cold_start && t > 1 {
            model.reinitialize(derive_seed(cfg.train.seed, &format!("cold-{t}")));
        }
        let moral = prev.as_ref().map(|p| MoralRef { prev: p.clone(), t });
        let history = model.train(obs, &tc, moral.as_ref())?;
        let graph_before = model.read_graph(thr);
        let last = n - t;
        let active: Vec<usize> = (0..=last).collect();
        let sink = pick_sink(&model, &active, thr)?;
        let order = rotation(n, sink, last);
        model.permute(&order)?;
        model.freeze_node(last)?;
        prev = Some(model.binary_adjacency());
        iterations.push(IterationLog {
            t,
            graph_before,
            sink,
            order,
            graph_after: model.read_graph(thr),
            history,
            model: model.clone(),
        });
    }
    let graph = model.read_graph(thr);
    Ok(RunResult {
        model,
        graph,
        iterations,
    })
}

/// Builds a model for `obs` and runs the iterations. For a single latent the
/// loop is empty, so one plain training phase is run instead.
pub fn fit(model_cfg: ModelConfig, obs: &Observations, cfg: &DriverConfig) -> Result<RunResult> {
    let mut model = CrlModel::init(model_cfg, obs, derive_seed(cfg.train.seed, "model"))?;
    if model.n() == 1 {
        let mut tc = cfg.train.clone();
        tc.seed = derive_seed(cfg.train.seed, "iteration-1");
        let history = model.train(obs, &tc, None)?;
        let graph = model.read_graph(model.config.threshold);
        let log = IterationLog {
            t: 1,
            graph_before: graph.clone(),
            sink: 0,
            order: vec![0],
            graph_after: graph.clone(),
            history,
            model: model.clone(),
        };
        return Ok(RunResult {
            model,
            graph,
            iterations: vec![log],
        });
    }
    run_algorithm1(model, obs, cfg)
}
