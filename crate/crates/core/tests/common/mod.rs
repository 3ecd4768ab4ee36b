//! Definition-level reference implementations used as test oracles. Each one
//! reads the graph only through `n()` and `has_edge`.
#![allow(dead_code)]

use std::collections::BTreeSet;

use crl_core::graph::{all_permutations, Dag};

/// `a — b` in the moral graph: an edge either way, or a common child.
pub fn moral_edge(g: &Dag, a: usize, b: usize) -> bool {
    a != b
        && (g.has_edge(a, b)
            || g.has_edge(b, a)
            || (0..g.n()).any(|c| g.has_edge(a, c) && g.has_edge(b, c)))
}

pub fn is_sink(g: &Dag, i: usize) -> bool {
    (0..g.n()).all(|j| !g.has_edge(i, j))
}

/// Directed path of length ≥ 1 from `a` to `b`, by depth-first search.
pub fn reaches(g: &Dag, a: usize, b: usize) -> bool {
    let mut seen = vec![false; g.n()];
    let mut stack = vec![a];
    while let Some(v) = stack.pop() {
        for w in 0..g.n() {
            if g.has_edge(v, w) && !seen[w] {
                if w == b {
                    return true;
                }
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    false
}

/// Parents of `i` that also point to every child of `i`.
pub fn surrounding(g: &Dag, i: usize) -> BTreeSet<usize> {
    (0..g.n())
        .filter(|&p| g.has_edge(p, i))
        .filter(|&p| (0..g.n()).filter(|&c| g.has_edge(i, c)).all(|c| g.has_edge(p, c)))
        .collect()
}

/// Neighbours of `i` in the moral graph of the sub-DAG on `nodes`, adjacent
/// to every other such neighbour. Returned as original labels.
pub fn intimate_in_moral(g: &Dag, nodes: &[usize], i: usize) -> BTreeSet<usize> {
    let adj = |a: usize, b: usize| {
        a != b
            && (g.has_edge(a, b)
                || g.has_edge(b, a)
                || nodes.iter().any(|&c| g.has_edge(a, c) && g.has_edge(b, c)))
    };
    let nb: Vec<usize> = nodes.iter().copied().filter(|&j| adj(i, j)).collect();
    nb.iter()
        .copied()
        .filter(|&j| nb.iter().all(|&k| k == j || adj(j, k)))
        .collect()
}

pub fn causal_orders(g: &Dag) -> Vec<Vec<usize>> {
    all_permutations(g.n())
        .into_iter()
        .filter(|p| {
            (0..p.len()).all(|a| (a + 1..p.len()).all(|b| !g.has_edge(p[b], p[a])))
        })
        .collect()
}

pub fn closed_subsets(g: &Dag) -> Vec<Vec<usize>> {
    let n = g.n();
    (1u32..(1 << n))
        .map(|mask| (0..n).filter(|&i| mask >> i & 1 == 1).collect::<Vec<_>>())
        .filter(|s| s.iter().all(|&v| (0..n).all(|p| !g.has_edge(p, v) || s.contains(&p))))
        .collect()
}

/// Compares every graph operation against its definition; returns the first
/// disagreement.
pub fn check_graph(g: &Dag) -> Result<(), String> {
    let n = g.n();
    let moral = g.moralize();
    let closure = g.transitive_closure();
    let sinks = g.sinks();
    for a in 0..n {
        if sinks.contains(&a) != is_sink(g, a) {
            return Err(format!("{g}: sink status of {a}"));
        }
        let sur: BTreeSet<usize> = g.surrounding_parents(a).into_iter().collect();
        if sur != surrounding(g, a) {
            return Err(format!("{g}: surrounding parents of {a}"));
        }
        let all: Vec<usize> = (0..n).collect();
        let int: BTreeSet<usize> = moral.intimate_neighbors(a).into_iter().collect();
        if int != intimate_in_moral(g, &all, a) {
            return Err(format!("{g}: intimate neighbours of {a}"));
        }
        for b in 0..n {
            if moral.has_edge(a, b) != moral_edge(g, a, b) {
                return Err(format!("{g}: moral edge {a}-{b}"));
            }
            if closure.has_edge(a, b) != reaches(g, a, b) {
                return Err(format!("{g}: reachability {a}->{b}"));
            }
        }
    }
    let order = g.topological_order().ok_or("acyclic graph without order")?;
    if !causal_orders(g).contains(&order) {
        return Err(format!("{g}: topological order {order:?}"));
    }
    for s in 1u32..(1 << n) {
        let set: Vec<usize> = (0..n).filter(|&i| s >> i & 1 == 1).collect();
        let mut want: BTreeSet<usize> = set.iter().copied().collect();
        for v in 0..n {
            if set.iter().any(|&t| reaches(g, v, t)) {
                want.insert(v);
            }
        }
        let got: BTreeSet<usize> = g.ancestral_closure(&set).into_iter().collect();
        if got != want {
            return Err(format!("{g}: ancestral closure of {set:?}"));
        }
    }
    Ok(())
}

/// For every causal order `α` and position `i`, intimate neighbours of
/// `α(i)` taken jointly over the moral graphs of all prefixes that contain it
/// lie among the surrounding parents of `α(i)`.
pub fn check_intimate_within_surrounding(g: &Dag) -> Result<(), String> {
    let n = g.n();
    for alpha in causal_orders(g) {
        for i in 0..n {
            let node = alpha[i];
            let mut common: Option<BTreeSet<usize>> = None;
            for k in i + 1..=n {
                let prefix = &alpha[..k];
                let sub = g.induced_subdag(prefix).map_err(|e| e.to_string())?;
                let pos = prefix.iter().position(|&v| v == node).expect("in prefix");
                let psi: BTreeSet<usize> = sub
                    .moralize()
                    .intimate_neighbors(pos)
                    .into_iter()
                    .map(|p| prefix[p])
                    .collect();
                common = Some(match common {
                    None => psi,
                    Some(c) => c.intersection(&psi).copied().collect(),
                });
            }
            let common = common.unwrap_or_default();
            if !common.is_subset(&surrounding(g, node)) {
                return Err(format!("{g}, order {alpha:?}, node {node}: {common:?}"));
            }
        }
    }
    Ok(())
}
