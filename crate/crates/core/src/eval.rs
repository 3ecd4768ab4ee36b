//! Comparison of estimated latents and graphs against ground truth.

use std::fs;
use std::io::Write;
use std::path::Path;

use crl_autodiff::Tensor;
use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::graph::{all_permutations, Dag, NodePermutation};
use crate::{CoreError, Result};

/// Largest latent count aligned by exhaustive search; larger problems use
/// the Hungarian method on scaled integer scores.
pub const EXHAUSTIVE_ALIGN_MAX: usize = 8;

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            ranks[i] = r;
        }
        k = e + 1;
    }
    ranks
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2().unwrap_or((0, 0))
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    let (_, cols) = dims(t);
    t.data().iter().skip(c).step_by(cols.max(1)).copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// `permutation[i]` is the true latent matched to estimated component `i`.
    pub permutation: Vec<usize>,
    /// `scores[i][j] = |Spearman(Ẑ_i, Z_j)|`.
    pub scores: Vec<Vec<f64>>,
    /// `scores[i][permutation[i]]`.
    pub aligned: Vec<f64>,
}

impl AlignmentResult {
    pub fn node_permutation(&self) -> NodePermutation {
        NodePermutation::new(self.permutation.clone()).expect("alignment is a bijection")
    }
}

/// Matching of estimated to true components maximizing total |Spearman|.
pub fn align(zhat: &Tensor, z: &Tensor) -> Result<AlignmentResult> {
    let (r1, n) = dims(zhat);
    let (r2, n2) = dims(z);
    if r1 != r2 || n != n2 {
        return Err(CoreError::DimensionMismatch(format!(
            "estimated latents {r1}×{n} vs true {r2}×{n2}"
        )));
    }
    let zr: Vec<Vec<f64>> = (0..n).map(|j| average_ranks(&column(z, j))).collect();
    let scores: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let hr = average_ranks(&column(zhat, i));
            zr.iter().map(|r| pearson(&hr, r).abs()).collect()
        })
        .collect();
    let permutation = if n <= EXHAUSTIVE_ALIGN_MAX {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for p in all_permutations(n) {
            let s: f64 = (0..n).map(|i| scores[i][p[i]]).sum();
            if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
                best = Some((s, p));
            }
        }
        best.map(|(_, p)| p).unwrap_or_default()
    } else {
        let w = Matrix::from_fn(n, n, |(i, j)| (scores[i][j] * 1e12).round() as i64);
        kuhn_munkres(&w).1
    };
    let aligned = (0..n).map(|i| scores[i][permutation[i]]).collect();
    Ok(AlignmentResult {
        permutation,
        scores,
        aligned,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureReport {
    pub exact_match: bool,
    pub shd: usize,
    pub moral_shd: usize,
    pub tc_shd: usize,
}

/// Compares `ghat` relabeled by `perm` (estimated node `i` ↦ true node
/// `perm(i)`) against `g`, and the moral graphs and transitive closures of
/// the two against each other.
pub fn structure_report(ghat: &Dag, g: &Dag, perm: &NodePermutation) -> Result<StructureReport> {
    let relabeled = ghat.permuted(perm)?;
    let shd = relabeled.shd(g)?;
    Ok(StructureReport {
        exact_match: shd == 0,
        shd,
        moral_shd: relabeled.moralize().distance(&g.moralize())?,
        tc_shd: relabeled.transitive_closure().shd(&g.transitive_closure())?,
    })
}

/// Leave-one-out k-NN regression R² of `y` on the columns `cols` of `x`
/// (standardized). An empty predictor set scores 0.
pub fn knn_r2(x: &Tensor, cols: &[usize], y: &[f64], k: usize) -> Result<f64> {
    let (rows, _) = dims(x);
    if rows != y.len() {
        return Err(CoreError::DimensionMismatch("predictor and target rows".into()));
    }
    if k == 0 || k >= rows {
        return Err(CoreError::InvalidConfig(format!("k = {k} needs 0 < k < N = {rows}")));
    }
    if cols.is_empty() {
        return Ok(0.0);
    }
    let feats: Vec<Vec<f64>> = cols
        .iter()
        .map(|&c| {
            let v = column(x, c);
            let m = v.iter().sum::<f64>() / rows as f64;
            let s = (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / rows as f64).sqrt();
            let s = if s > 0.0 { s } else { 1.0 };
            v.iter().map(|a| (a - m) / s).collect()
        })
        .collect();
    let p = feats.len();
    let pts: Vec<f64> = (0..rows).flat_map(|r| feats.iter().map(move |f| f[r])).collect();
    let mean_y = y.iter().sum::<f64>() / rows as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum();
    if ss_tot == 0.0 {
        return Ok(0.0);
    }
    let mut ss_res = 0.0;
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(rows);
    for r in 0..rows {
        dist.clear();
        let a = &pts[r * p..(r + 1) * p];
        for q in 0..rows {
            if q != r {
                let b = &pts[q * p..(q + 1) * p];
                let d: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
                dist.push((d, q));
            }
        }
        dist.select_nth_unstable_by(k - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let pred = dist[..k].iter().map(|&(_, q)| y[q]).sum::<f64>() / k as f64;
        ss_res += (y[r] - pred).powi(2);
    }
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingRow {
    /// True latent (0-based).
    pub node: usize,
    /// Estimated component matched to it.
    pub estimate: usize,
    /// The node and its surrounding parents.
    pub allowed: Vec<usize>,
    pub r2_allowed: f64,
    pub r2_complement: f64,
    pub r2_all: f64,
    pub improvement: f64,
    pub supported: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingOptions {
    pub k: usize,
    pub max_rows: usize,
    pub min_r2: f64,
    pub max_improvement: f64,
}

impl Default for MixingOptions {
    fn default() -> Self {
        Self {
            k: 10,
            max_rows: 3000,
            min_r2: 0.9,
            max_improvement: 0.05,
        }
    }
}

/// Evenly strided row subset of at most `max` rows.
pub fn subsample(t: &Tensor, max: usize) -> Tensor {
    let (rows, cols) = dims(t);
    if rows <= max {
        return t.clone();
    }
    let data = (0..max)
        .flat_map(|k| {
            let r = k * rows / max;
            t.data()[r * cols..(r + 1) * cols].to_vec()
        })
        .collect();
    Tensor::matrix(max, cols, data).expect("sized")
}

/// For each true latent `i`, how well the matched estimate is explained by
/// `{Z_i} ∪ sur(Z_i)` versus the remaining latents.
pub fn mixing_check(
    zhat: &Tensor,
    z: &Tensor,
    g: &Dag,
    perm: &NodePermutation,
    opts: &MixingOptions,
) -> Result<Vec<MixingRow>> {
    let n = g.n();
    if dims(zhat).1 != n || dims(z).1 != n || perm.len() != n || dims(zhat).0 != dims(z).0 {
        return Err(CoreError::DimensionMismatch("mixing check inputs".into()));
    }
    let zh = subsample(zhat, opts.max_rows);
    let zs = subsample(z, opts.max_rows);
    let inv = perm.inverse();
    let all: Vec<usize> = (0..n).collect();
    (0..n)
        .map(|i| {
            let e = inv.apply(i);
            let y = column(&zh, e);
            let mut allowed = vec![i];
            allowed.extend(g.surrounding_parents(i));
            allowed.sort_unstable();
            let complement: Vec<usize> = all.iter().copied().filter(|c| !allowed.contains(c)).collect();
            let r2_allowed = knn_r2(&zs, &allowed, &y, opts.k)?;
            let r2_complement = knn_r2(&zs, &complement, &y, opts.k)?;
            let r2_all = knn_r2(&zs, &all, &y, opts.k)?;
            let improvement = r2_all - r2_allowed;
            Ok(MixingRow {
                node: i,
                estimate: e,
                allowed,
                r2_allowed,
                r2_complement,
                r2_all,
                improvement,
                supported: r2_allowed >= opts.min_r2 && improvement < opts.max_improvement,
            })
        })
        .collect()
}

/// Long-format scatter table `i,j,zhat,z` (1-based panel indices): panel
/// `(i, j)` pairs the estimate matched to true latent `i` with `Z_j`.
pub fn scatter_export(zhat: &Tensor, z: &Tensor, perm: &NodePermutation, path: &Path) -> Result<()> {
    let (rows, n) = dims(z);
    if dims(zhat) != (rows, n) || perm.len() != n {
        return Err(CoreError::DimensionMismatch("scatter inputs".into()));
    }
    let inv = perm.inverse();
    let mut out = Vec::with_capacity(rows * n * n * 48 + 16);
    writeln!(out, "i,j,zhat,z")?;
    for i in 0..n {
        let e = inv.apply(i);
        for j in 0..n {
            for r in 0..rows {
                writeln!(out, "{},{},{:e},{:e}", i + 1, j + 1, zhat.get2(r, e), z.get2(r, j))?;
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}
