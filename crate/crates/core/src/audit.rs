//! Sufficient-change audits: derivative vectors across environments, the rank
//! of their differences, and the environment-count formula.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::DerivMethod;
use crate::graph::Dag;
use crate::scm::SemSpec;
use crate::{CoreError, Result};

pub const MAX_AUDIT_NODES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorKind {
    Tau,
    WAnm,
    WHnm,
}

/// Which derivative each entry of a change vector holds. An index tuple of
/// length `k` is the `k`-th order partial derivative over those latents
/// (0-based, original labels).
pub type Layout = Vec<Vec<usize>>;

/// Entry layout for `subset` (sorted, ancestrally closed). Blocks: first
/// order, second diagonal, second cross over moral edges `i<j`, then for the
/// `w` kinds: third diagonal over non-sinks, `∂_i²∂_j` over moral edges
/// `i<j` (non-sink `i` only for additive noise; with `both_orderings` also
/// `∂_j²∂_i` when `j` is a non-sink), and moral triangles `i<j<k`.
pub fn layout(graph: &Dag, subset: &[usize], kind: VectorKind, both_orderings: bool) -> Result<Layout> {
    if !graph.is_ancestrally_closed(subset) {
        return Err(CoreError::NotAncestrallyClosed(subset.to_vec()));
    }
    let mut nodes = subset.to_vec();
    nodes.sort_unstable();
    let sub = graph.induced_subdag(&nodes)?;
    let moral = sub.moralize();
    let sinks = sub.sinks();
    let k = nodes.len();
    let label = |v: &[usize]| -> Vec<usize> { v.iter().map(|&i| nodes[i]).collect() };

    let mut out: Layout = Vec::new();
    out.extend((0..k).map(|i| label(&[i])));
    out.extend((0..k).map(|i| label(&[i, i])));
    let edges = moral.edges();
    out.extend(edges.iter().map(|&(i, j)| label(&[i, j])));
    if kind == VectorKind::Tau {
        return Ok(out);
    }
    out.extend((0..k).filter(|i| !sinks.contains(i)).map(|i| label(&[i, i, i])));
    for &(i, j) in &edges {
        match kind {
            VectorKind::WHnm => out.push(label(&[i, i, j])),
            _ => {
                if !sinks.contains(&i) {
                    out.push(label(&[i, i, j]));
                }
                if both_orderings && !sinks.contains(&j) {
                    out.push(label(&[j, j, i]));
                }
            }
        }
    }
    out.extend(moral.triangles().iter().map(|&(i, j, l)| label(&[i, j, l])));
    Ok(out)
}

/// `3n + 3|E(M)| + |Δ(M)| − 2|S| + 1`.
pub fn required_environments(g: &Dag) -> usize {
    let m = g.moralize();
    3 * g.n() + 3 * m.edge_count() + m.triangles().len() + 1 - 2 * g.sinks().len()
}

/// `|w_anm| + 1` for the full node set, i.e. the count implied by the
/// literal vector definition.
pub fn literal_environments(g: &Dag, both_orderings: bool) -> usize {
    let all: Vec<usize> = (0..g.n()).collect();
    layout(g, &all, VectorKind::WAnm, both_orderings).map_or(1, |l| l.len() + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentCounts {
    pub formula_count: usize,
    pub literal_count: usize,
}

pub fn environment_counts(g: &Dag, both_orderings: bool) -> EnvironmentCounts {
    EnvironmentCounts {
        formula_count: required_environments(g),
        literal_count: literal_environments(g, both_orderings),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeVector {
    pub subset: Vec<usize>,
    pub env: usize,
    pub kind: VectorKind,
    pub entries: Vec<f64>,
    pub layout: Layout,
}

/// Derivative vector of the marginal log-density over `subset` in
/// environment `u`, at `point` (one value per subset node, ascending order).
pub fn build_vector(
    spec: &SemSpec,
    subset: &[usize],
    u: usize,
    point: &[f64],
    kind: VectorKind,
    both_orderings: bool,
    method: DerivMethod,
) -> Result<ChangeVector> {
    let lay = layout(&spec.graph, subset, kind, both_orderings)?;
    let mut nodes = subset.to_vec();
    nodes.sort_unstable();
    if point.len() != nodes.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "point has {} values for a subset of {}",
            point.len(),
            nodes.len()
        )));
    }
    let sub = spec.restrict(&nodes)?;
    let b = method.bundle(&sub, u, point)?;
    let local = |v: usize| nodes.iter().position(|&x| x == v).expect("subset member");
    let entries = lay
        .iter()
        .map(|idx| match idx.as_slice() {
            [i] => b.grad[local(*i)],
            [i, j] => b.hess(local(*i), local(*j)),
            [i, j, k] => b.third(local(*i), local(*j), local(*k)),
            _ => unreachable!("layouts hold orders 1 to 3"),
        })
        .collect();
    Ok(ChangeVector {
        subset: nodes,
        env: u,
        kind,
        entries,
        layout: lay,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub subset: Vec<usize>,
    pub kind: VectorKind,
    pub point: Vec<f64>,
    pub num_envs: usize,
    pub reference_env: usize,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub required_rank: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    pub svd_tol: f64,
    pub both_orderings: bool,
    pub method: DerivMethod,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            svd_tol: 1e-8,
            both_orderings: false,
            method: DerivMethod::Analytic,
        }
    }
}

/// Numeric rank of the rows `v(u_j) − v(u_0)`, with `u_0 = envs[0]`.
pub fn rank_test(
    spec: &SemSpec,
    subset: &[usize],
    kind: VectorKind,
    envs: &[usize],
    point: &[f64],
    opts: &AuditOptions,
) -> Result<RankReport> {
    let vectors = envs
        .iter()
        .map(|&u| build_vector(spec, subset, u, point, kind, opts.both_orderings, opts.method))
        .collect::<Result<Vec<_>>>()?;
    let required = match vectors.first() {
        Some(v) => v.layout.len(),
        None => layout(&spec.graph, subset, kind, opts.both_orderings)?.len(),
    };
    let rows = envs.len().saturating_sub(1);
    let singular_values = if rows == 0 || required == 0 {
        Vec::new()
    } else {
        let base = &vectors[0].entries;
        let m = DMatrix::from_fn(rows, required, |r, c| vectors[r + 1].entries[c] - base[c]);
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    };
    let top = singular_values.first().copied().unwrap_or(0.0);
    let rank = if top > 0.0 {
        singular_values.iter().filter(|&&s| s > opts.svd_tol * top).count()
    } else {
        0
    };
    let mut nodes = subset.to_vec();
    nodes.sort_unstable();
    Ok(RankReport {
        subset: nodes,
        kind,
        point: point.to_vec(),
        num_envs: envs.len(),
        reference_env: envs.first().copied().unwrap_or(0),
        singular_values,
        rank,
        required_rank: required,
        pass: rank >= required,
    })
}

/// Rank tests for every ancestrally closed subset, kind and probe point.
/// `points` are full latent vectors; each subset uses its own coordinates.
pub fn audit_all_subsets(
    spec: &SemSpec,
    envs: &[usize],
    points: &[Vec<f64>],
    kinds: &[VectorKind],
    opts: &AuditOptions,
) -> Result<Vec<RankReport>> {
    let n = spec.n();
    if n > MAX_AUDIT_NODES {
        return Err(CoreError::TooLarge {
            what: "subset audit",
            n,
            max: MAX_AUDIT_NODES,
        });
    }
    let mut jobs = Vec::new();
    for subset in spec.graph.ancestrally_closed_subsets() {
        for &kind in kinds {
            for z in points {
                jobs.push((subset.clone(), kind, subset.iter().map(|&i| z[i]).collect::<Vec<_>>()));
            }
        }
    }
    jobs.par_iter()
        .map(|(s, k, p)| rank_test(spec, s, *k, envs, p, opts))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub graph: Dag,
    pub environments: EnvironmentCounts,
    pub num_envs: usize,
    pub pass: bool,
    pub reports: Vec<RankReport>,
}

pub fn summarize(spec: &SemSpec, envs: &[usize], reports: Vec<RankReport>, both_orderings: bool) -> AuditSummary {
    AuditSummary {
        graph: spec.graph.clone(),
        environments: environment_counts(&spec.graph, both_orderings),
        num_envs: envs.len(),
        pass: reports.iter().all(|r| r.pass),
        reports,
    }
}
