//! Exact graph algorithms over latent indices.
//!
//! A [`Dag`] stores its adjacency as `(child, parent)` pairs: entry `(i, j)`
//! set means `Z_j → Z_i`, matching the estimator's gate matrix where
//! `A[i][j] = 1` means `Ẑ_j → Ẑ_i`. Nodes are 0-based; `Display` output and
//! reports use 1-based `Z1, Z2, …` labels.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "DagJson", into = "DagJson")]
pub struct Dag {
    n: usize,
    adj: Vec<bool>,
}

/// Wire form: `{"n": 3, "edges": [[child, parent], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DagJson {
    n: usize,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<DagJson> for Dag {
    type Error = CoreError;
    fn try_from(j: DagJson) -> Result<Self> {
        let edges: Vec<(usize, usize)> = j.edges.iter().map(|e| (e[0], e[1])).collect();
        Dag::new(j.n, &edges)
    }
}

impl From<Dag> for DagJson {
    fn from(d: Dag) -> Self {
        DagJson {
            n: d.n,
            edges: d.edges().into_iter().map(|(c, p)| [c, p]).collect(),
        }
    }
}

impl Dag {
    /// Builds a DAG from `(child, parent)` pairs.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![false; n * n];
        for &(c, p) in edges {
            check_node(c, n)?;
            check_node(p, n)?;
            if c == p {
                return Err(CoreError::SelfLoop(c));
            }
            adj[c * n + p] = true;
        }
        let g = Self { n, adj };
        if g.topological_order().is_none() {
            return Err(CoreError::Cyclic);
        }
        Ok(g)
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n,
            adj: vec![false; n * n],
        }
    }

    /// Row-major `(child, parent)` boolean matrix.
    pub fn from_adjacency(n: usize, adj: Vec<bool>) -> Result<Self> {
        if adj.len() != n * n {
            return Err(CoreError::DimensionMismatch(format!(
                "adjacency of length {} for n = {n}",
                adj.len()
            )));
        }
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|c| (0..n).map(move |p| (c, p)))
            .filter(|&(c, p)| adj[c * n + p])
            .collect();
        Self::new(n, &edges)
    }

    /// `Z1 → Z2 → … → Zn`.
    pub fn chain(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i, i - 1)).collect();
        Self::new(n, &edges).expect("chain is acyclic")
    }

    /// `Z1 → Z2 ← Z3`.
    pub fn collider3() -> Self {
        Self::new(3, &[(1, 0), (1, 2)]).expect("collider is acyclic")
    }

    /// `Z1 → Z3 ← Z2`.
    pub fn pair3() -> Self {
        Self::new(3, &[(2, 0), (2, 1)]).expect("acyclic")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// True when `parent → child`.
    pub fn has_edge(&self, parent: usize, child: usize) -> bool {
        self.adj[child * self.n + parent]
    }

    /// All edges as `(child, parent)`, sorted by child then parent.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n;
        (0..n)
            .flat_map(|c| (0..n).map(move |p| (c, p)))
            .filter(|&(c, p)| self.adj[c * n + p])
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().filter(|&&b| b).count()
    }

    pub fn parents(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&p| self.has_edge(p, i)).collect()
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&c| self.has_edge(i, c)).collect()
    }

    /// Kahn's algorithm, always releasing the lowest-index ready node.
    /// `None` if the graph is cyclic.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let mut indeg: Vec<usize> = (0..self.n).map(|i| self.parents(i).len()).collect();
        let mut ready: BTreeSet<usize> = (0..self.n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.n);
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for c in self.children(v) {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        (order.len() == self.n).then_some(order)
    }

    pub fn sinks(&self) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| (0..self.n).all(|c| !self.has_edge(i, c)))
            .collect()
    }

    /// Parents of `Z_i` that are also parents of every child of `Z_i`.
    pub fn surrounding_parents(&self, i: usize) -> Vec<usize> {
        let children = self.children(i);
        self.parents(i)
            .into_iter()
            .filter(|&p| children.iter().all(|&c| self.has_edge(p, c)))
            .collect()
    }

    /// Smallest superset of `s` closed under taking parents.
    pub fn ancestral_closure(&self, s: &[usize]) -> Vec<usize> {
        let mut closed: BTreeSet<usize> = s.iter().copied().collect();
        let mut stack: Vec<usize> = s.to_vec();
        while let Some(v) = stack.pop() {
            for p in self.parents(v) {
                if closed.insert(p) {
                    stack.push(p);
                }
            }
        }
        closed.into_iter().collect()
    }

    pub fn is_ancestrally_closed(&self, s: &[usize]) -> bool {
        let set: BTreeSet<usize> = s.iter().copied().collect();
        s.iter()
            .all(|&v| self.parents(v).iter().all(|p| set.contains(p)))
    }

    /// All nonempty ancestrally closed node sets, each sorted ascending,
    /// ordered by bitmask.
    pub fn ancestrally_closed_subsets(&self) -> Vec<Vec<usize>> {
        let n = self.n;
        let parent_mask: Vec<u64> = (0..n)
            .map(|i| self.parents(i).iter().fold(0u64, |m, &p| m | 1 << p))
            .collect();
        (1u64..(1u64 << n))
            .filter(|&s| (0..n).all(|i| s >> i & 1 == 0 || parent_mask[i] & !s == 0))
            .map(|s| (0..n).filter(|&i| s >> i & 1 == 1).collect())
            .collect()
    }

    /// Sub-DAG over `nodes`, relabelled so that `nodes[k]` becomes node `k`.
    pub fn induced_subdag(&self, nodes: &[usize]) -> Result<Dag> {
        for &v in nodes {
            check_node(v, self.n)?;
        }
        let k = nodes.len();
        let mut adj = vec![false; k * k];
        for (ci, &c) in nodes.iter().enumerate() {
            for (pi, &p) in nodes.iter().enumerate() {
                adj[ci * k + pi] = self.has_edge(p, c);
            }
        }
        Ok(Dag { n: k, adj })
    }

    pub fn transitive_closure(&self) -> Dag {
        let n = self.n;
        let mut reach = self.adj.clone();
        // Warshall over (child, parent): parent →* mid →* child.
        for mid in 0..n {
            for c in 0..n {
                if !reach[c * n + mid] {
                    continue;
                }
                for p in 0..n {
                    if reach[mid * n + p] {
                        reach[c * n + p] = true;
                    }
                }
            }
        }
        Dag { n, adj: reach }
    }

    /// Skeleton plus an edge between every pair of co-parents.
    pub fn moralize(&self) -> UGraph {
        let mut m = self.skeleton();
        for c in 0..self.n {
            let pa = self.parents(c);
            for (a, &p) in pa.iter().enumerate() {
                for &q in &pa[a + 1..] {
                    m.set(p, q);
                }
            }
        }
        m
    }

    pub fn skeleton(&self) -> UGraph {
        let mut u = UGraph::empty(self.n);
        for (c, p) in self.edges() {
            u.set(c, p);
        }
        u
    }

    /// Structural Hamming distance: one per unordered pair whose edge state
    /// (absent, `i → j`, `j → i`) differs.
    pub fn shd(&self, other: &Dag) -> Result<usize> {
        self.same_n(other)?;
        let mut d = 0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                let a = (self.has_edge(i, j), self.has_edge(j, i));
                let b = (other.has_edge(i, j), other.has_edge(j, i));
                if a != b {
                    d += 1;
                }
            }
        }
        Ok(d)
    }

    /// Relabels node `i` as `perm(i)`.
    pub fn permuted(&self, perm: &NodePermutation) -> Result<Dag> {
        if perm.len() != self.n {
            return Err(CoreError::DimensionMismatch(format!(
                "permutation of length {} for n = {}",
                perm.len(),
                self.n
            )));
        }
        let edges: Vec<_> = self
            .edges()
            .into_iter()
            .map(|(c, p)| (perm.apply(c), perm.apply(p)))
            .collect();
        Dag::new(self.n, &edges)
    }

    fn same_n(&self, other: &Dag) -> Result<()> {
        if self.n != other.n {
            return Err(CoreError::DimensionMismatch(format!(
                "graphs with {} and {} nodes",
                self.n, other.n
            )));
        }
        Ok(())
    }
}

/// `a_i → a_j` in `a` iff `b_{p(i)} → b_{p(j)}` in `b`.
pub fn graphs_identical_under(p: &NodePermutation, a: &Dag, b: &Dag) -> Result<bool> {
    a.same_n(b)?;
    if p.len() != a.n {
        return Err(CoreError::DimensionMismatch(format!(
            "permutation of length {} for n = {}",
            p.len(),
            a.n
        )));
    }
    Ok((0..a.n).all(|i| (0..a.n).all(|j| a.has_edge(i, j) == b.has_edge(p.apply(i), p.apply(j)))))
}

impl fmt::Display for Dag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let edges = self.edges();
        if edges.is_empty() {
            return write!(f, "(no edges on {} nodes)", self.n);
        }
        let parts: Vec<String> = edges
            .iter()
            .map(|(c, p)| format!("Z{}→Z{}", p + 1, c + 1))
            .collect();
        write!(f, "{}", parts.join(", "))
    }
}

/// Undirected simple graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "UGraphJson", into = "UGraphJson")]
pub struct UGraph {
    n: usize,
    adj: Vec<bool>,
}

/// Wire form: `{"n": 3, "edges": [[i, j], ...]}` with `i < j`, sorted.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct UGraphJson {
    n: usize,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<UGraphJson> for UGraph {
    type Error = CoreError;
    fn try_from(j: UGraphJson) -> Result<Self> {
        let pairs: Vec<(usize, usize)> = j.edges.iter().map(|e| (e[0], e[1])).collect();
        UGraph::new(j.n, &pairs)
    }
}

impl From<UGraph> for UGraphJson {
    fn from(u: UGraph) -> Self {
        UGraphJson {
            n: u.n,
            edges: u.edges().into_iter().map(|(a, b)| [a, b]).collect(),
        }
    }
}

impl UGraph {
    pub fn new(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut u = Self::empty(n);
        for &(a, b) in pairs {
            check_node(a, n)?;
            check_node(b, n)?;
            if a == b {
                return Err(CoreError::SelfLoop(a));
            }
            u.set(a, b);
        }
        Ok(u)
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n,
            adj: vec![false; n * n],
        }
    }

    pub(crate) fn set(&mut self, a: usize, b: usize) {
        self.adj[a * self.n + b] = true;
        self.adj[b * self.n + a] = true;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a * self.n + b]
    }

    /// Sorted `(i, j)` pairs with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.has_edge(i, j)).collect()
    }

    /// Sorted `(i, j, k)` with `i < j < k`, all three pairs adjacent.
    pub fn triangles(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (i, j) in self.edges() {
            for k in j + 1..self.n {
                if self.has_edge(i, k) && self.has_edge(j, k) {
                    out.push((i, j, k));
                }
            }
        }
        out
    }

    /// Neighbours of `i` adjacent to every other neighbour of `i`.
    pub fn intimate_neighbors(&self, i: usize) -> Vec<usize> {
        let nb = self.neighbors(i);
        nb.iter()
            .copied()
            .filter(|&j| nb.iter().all(|&k| k == j || self.has_edge(j, k)))
            .collect()
    }

    pub fn is_subgraph_of(&self, other: &UGraph) -> bool {
        self.n == other.n
            && self
                .adj
                .iter()
                .zip(&other.adj)
                .all(|(&a, &b)| !a || b)
    }

    pub fn induced(&self, nodes: &[usize]) -> UGraph {
        let k = nodes.len();
        let mut u = UGraph::empty(k);
        for (a, &x) in nodes.iter().enumerate() {
            for (b, &y) in nodes.iter().enumerate() {
                if a != b && self.has_edge(x, y) {
                    u.set(a, b);
                }
            }
        }
        u
    }

    /// Number of unordered pairs whose adjacency differs.
    pub fn distance(&self, other: &UGraph) -> Result<usize> {
        if self.n != other.n {
            return Err(CoreError::DimensionMismatch(format!(
                "graphs with {} and {} nodes",
                self.n, other.n
            )));
        }
        let mut d = 0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) != other.has_edge(i, j) {
                    d += 1;
                }
            }
        }
        Ok(d)
    }
}

impl fmt::Display for UGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .edges()
            .iter()
            .map(|(a, b)| format!("Z{}–Z{}", a + 1, b + 1))
            .collect();
        if parts.is_empty() {
            write!(f, "(no edges on {} nodes)", self.n)
        } else {
            write!(f, "{}", parts.join(", "))
        }
    }
}

/// A bijection on `0..n`; `apply(i)` is the image of `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct NodePermutation(Vec<usize>);

impl TryFrom<Vec<usize>> for NodePermutation {
    type Error = CoreError;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<NodePermutation> for Vec<usize> {
    fn from(p: NodePermutation) -> Self {
        p.0
    }
}

impl NodePermutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(CoreError::NotAPermutation(mapping));
            }
            seen[m] = true;
        }
        Ok(Self(mapping))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &m) in self.0.iter().enumerate() {
            inv[m] = i;
        }
        Self(inv)
    }
}

/// All permutations of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).expect("pivot");
        cur.swap(i, j);
        cur[i + 1..].reverse();
    }
    out
}

/// Every labelled DAG on `n` nodes (1, 1, 3, 25, 543 for n = 0..=4).
pub fn enumerate_dags(n: usize) -> Vec<Dag> {
    assert!(n <= 5, "exhaustive DAG enumeration is limited to n <= 5");
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|c| (0..n).map(move |p| (c, p)))
        .filter(|(c, p)| c != p)
        .collect();
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << pairs.len()) {
        let mut adj = vec![false; n * n];
        for (b, &(c, p)) in pairs.iter().enumerate() {
            if mask >> b & 1 == 1 {
                adj[c * n + p] = true;
            }
        }
        let g = Dag { n, adj };
        if g.topological_order().is_some() {
            out.push(g);
        }
    }
    out
}

fn check_node(i: usize, n: usize) -> Result<()> {
    if i >= n {
        Err(CoreError::InvalidNode { node: i, n })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Dag {
        Dag::chain(3)
    }

    #[test]
    fn moralize_examples() {
        assert_eq!(chain().moralize().edges(), vec![(0, 1), (1, 2)]);
        assert_eq!(
            Dag::collider3().moralize().edges(),
            vec![(0, 1), (0, 2), (1, 2)]
        );
        assert_eq!(Dag::empty(3).moralize().edge_count(), 0);
    }

    #[test]
    fn sink_examples() {
        assert_eq!(chain().sinks(), vec![2]);
        assert_eq!(Dag::collider3().sinks(), vec![1]);
        assert_eq!(Dag::empty(3).sinks(), vec![0, 1, 2]);
    }

    #[test]
    fn surrounding_parent_examples() {
        assert_eq!(chain().surrounding_parents(2), vec![1]);
        assert!(chain().surrounding_parents(1).is_empty());
        assert_eq!(Dag::collider3().surrounding_parents(1), vec![0, 2]);
    }

    #[test]
    fn intimate_neighbor_examples() {
        let tri = UGraph::new(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(tri.intimate_neighbors(0), vec![1, 2]);
        let m = UGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
        assert!(m.intimate_neighbors(1).is_empty());
        assert_eq!(m.intimate_neighbors(0), vec![1]);
    }

    #[test]
    fn closed_subset_examples() {
        assert_eq!(chain().ancestrally_closed_subsets(), vec![vec![0], vec![0, 1], vec![0, 1, 2]]);
        assert_eq!(Dag::empty(3).ancestrally_closed_subsets().len(), 7);
        assert_eq!(
            Dag::collider3().ancestrally_closed_subsets(),
            vec![vec![0], vec![2], vec![0, 2], vec![0, 1, 2]]
        );
    }

    #[test]
    fn ancestral_closure_examples() {
        assert_eq!(chain().ancestral_closure(&[2]), vec![0, 1, 2]);
        assert_eq!(chain().ancestral_closure(&[0]), vec![0]);
        assert_eq!(Dag::collider3().ancestral_closure(&[1]), vec![0, 1, 2]);
    }

    #[test]
    fn closure_shd_identity() {
        let tc = chain().transitive_closure();
        assert_eq!(tc.edges(), vec![(1, 0), (2, 0), (2, 1)]);
        assert_eq!(chain().shd(&chain()).unwrap(), 0);
        assert!(graphs_identical_under(&NodePermutation::identity(3), &chain(), &chain()).unwrap());
        assert_eq!(Dag::empty(3).shd(&chain()).unwrap(), 2);
        assert!(chain().shd(&Dag::empty(2)).is_err());
    }

    #[test]
    fn reversed_edge_counts_once() {
        let rev = Dag::new(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(chain().shd(&rev).unwrap(), 2);
    }

    #[test]
    fn constructor_rejects_cycles_and_loops() {
        assert!(matches!(
            Dag::new(2, &[(0, 1), (1, 0)]),
            Err(CoreError::Cyclic)
        ));
        assert!(matches!(Dag::new(2, &[(1, 1)]), Err(CoreError::SelfLoop(1))));
        assert!(Dag::new(2, &[(2, 0)]).is_err());
    }

    #[test]
    fn topological_order_prefers_low_index() {
        let g = Dag::new(4, &[(0, 3), (1, 3)]).unwrap();
        assert_eq!(g.topological_order().unwrap(), vec![2, 3, 0, 1]);
    }

    #[test]
    fn dag_counts() {
        let counts: Vec<usize> = (0..=4).map(|n| enumerate_dags(n).len()).collect();
        assert_eq!(counts, vec![1, 1, 3, 25, 543]);
    }

    #[test]
    fn json_wire_format() {
        let s = serde_json::to_string(&chain()).unwrap();
        assert_eq!(s, r#"{"n":3,"edges":[[1,0],[2,1]]}"#);
        let back: Dag = serde_json::from_str(&s).unwrap();
        assert_eq!(back, chain());
        let bad: std::result::Result<Dag, _> =
            serde_json::from_str(r#"{"n":2,"edges":[[0,1],[1,0]]}"#);
        assert!(bad.is_err());
        let m = serde_json::to_string(&Dag::collider3().moralize()).unwrap();
        assert_eq!(m, r#"{"n":3,"edges":[[0,1],[0,2],[1,2]]}"#);
    }

    #[test]
    fn display_is_one_based() {
        assert_eq!(chain().to_string(), "Z1→Z2, Z2→Z3");
        assert_eq!(chain().moralize().to_string(), "Z1–Z2, Z2–Z3");
    }

    #[test]
    fn permutation_validation_and_inverse() {
        assert!(NodePermutation::new(vec![0, 0]).is_err());
        let p = NodePermutation::new(vec![1, 2, 0]).unwrap();
        let inv = p.inverse();
        for i in 0..3 {
            assert_eq!(inv.apply(p.apply(i)), i);
        }
        assert_eq!(all_permutations(3).len(), 6);
        assert_eq!(all_permutations(0).len(), 1);
    }

    #[test]
    fn permuted_graph_is_identical_under_that_permutation() {
        let p = NodePermutation::new(vec![2, 0, 1]).unwrap();
        let g = Dag::collider3();
        let h = g.permuted(&p).unwrap();
        assert!(graphs_identical_under(&p, &g, &h).unwrap());
        assert!(!graphs_identical_under(&NodePermutation::identity(3), &g, &h).unwrap());
    }
}
