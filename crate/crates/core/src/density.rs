//! Log-density of a known SEM and its first three derivatives, exact (via
//! jets) or by central finite differences, plus the pointwise checks built on
//! them.

use serde::{Deserialize, Serialize};

use crate::graph::UGraph;
use crate::jet::Jet;
use crate::scm::{sample_latents, Activation, MechanismNet, ModelClass, SemSpec, SCALE_FLOOR};
use crate::{CoreError, Result};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log p^{(u)}(z)` as a sum of Gaussian conditionals.
pub fn log_density(spec: &SemSpec, u: usize, z: &[f64]) -> Result<f64> {
    let env = spec.env(u)?;
    check_len(spec, z)?;
    let mut total = 0.0;
    let mut pa = Vec::new();
    for (i, p) in env.iter().enumerate() {
        pa.clear();
        pa.extend(spec.graph.parents(i).iter().map(|&q| z[q]));
        let sigma = p.std_at(&pa);
        let r = (z[i] - p.mech.eval(&pa) - p.noise_mean) / sigma;
        let term = -0.5 * r * r - sigma.ln() - HALF_LN_2PI;
        if !term.is_finite() {
            return Err(CoreError::NonFinite { node: i });
        }
        total += term;
    }
    Ok(total)
}

fn check_len(spec: &SemSpec, z: &[f64]) -> Result<()> {
    if z.len() != spec.n() {
        return Err(CoreError::DimensionMismatch(format!(
            "point has {} coordinates, model has {}",
            z.len(),
            spec.n()
        )));
    }
    Ok(())
}

pub fn net_jet(net: &MechanismNet, inputs: &[&Jet], nvars: usize) -> Result<Jet> {
    let last = net.layers.len() - 1;
    let mut h: Vec<Jet> = inputs.iter().map(|j| (*j).clone()).collect();
    for (k, layer) in net.layers.iter().enumerate() {
        let mut next = Vec::with_capacity(layer.outputs);
        for o in 0..layer.outputs {
            let mut s = Jet::constant(nvars, layer.bias[o]);
            for (i, x) in h.iter().enumerate() {
                let w = layer.weight(o, i);
                if w != 0.0 {
                    s.axpy(w, x);
                }
            }
            if k < last {
                s = match net.activation {
                    Activation::Tanh => s.tanh(),
                    Activation::Identity => s,
                    Activation::LeakyRelu { .. } => {
                        return Err(CoreError::UnsupportedProfile(
                            "leaky_relu mechanisms have no third derivative".into(),
                        ))
                    }
                };
            }
            next.push(s);
        }
        h = next;
    }
    Ok(h.swap_remove(0))
}

/// Log-density as a jet in whatever variables the input jets depend on.
pub fn log_density_jet(spec: &SemSpec, u: usize, z: &[Jet]) -> Result<Jet> {
    let env = spec.env(u)?;
    if z.len() != spec.n() {
        return Err(CoreError::DimensionMismatch(format!(
            "point has {} coordinates, model has {}",
            z.len(),
            spec.n()
        )));
    }
    let nvars = z.first().map_or(0, Jet::n);
    let mut total = Jet::constant(nvars, 0.0);
    for (i, p) in env.iter().enumerate() {
        let pa: Vec<&Jet> = spec.graph.parents(i).iter().map(|&q| &z[q]).collect();
        let f = net_jet(&p.mech, &pa, nvars)?;
        let resid = z[i].sub(&f).add_const(-p.noise_mean);
        let term = match &p.scale_net {
            None => {
                let s = p.noise_std;
                resid
                    .square()
                    .scale(-0.5 / (s * s))
                    .add_const(-s.ln() - HALF_LN_2PI)
            }
            Some(net) => {
                let sigma = net_jet(net, &pa, nvars)?.softplus().add_const(SCALE_FLOOR);
                let q = resid.mul(&sigma.recip());
                q.square().scale(-0.5).sub(&sigma.ln()).add_const(-HALF_LN_2PI)
            }
        };
        if !term.is_finite() {
            return Err(CoreError::NonFinite { node: i });
        }
        total.axpy(1.0, &term);
    }
    Ok(total)
}

/// Gradient, Hessian and third-derivative tensor of `log p^{(u)}` at a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeBundle {
    pub point: Vec<f64>,
    pub env: usize,
    pub grad: Vec<f64>,
    /// Row-major `n × n`.
    pub hess: Vec<f64>,
    /// Row-major `n × n × n`.
    pub third: Vec<f64>,
}

impl DerivativeBundle {
    pub fn n(&self) -> usize {
        self.point.len()
    }

    pub fn hess(&self, a: usize, b: usize) -> f64 {
        self.hess[a * self.n() + b]
    }

    pub fn third(&self, a: usize, b: usize, c: usize) -> f64 {
        let n = self.n();
        self.third[(a * n + b) * n + c]
    }

    /// Largest entrywise gap to another bundle at the same point.
    pub fn max_abs_diff(&self, other: &DerivativeBundle) -> f64 {
        let gap = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        gap(&self.grad, &other.grad)
            .max(gap(&self.hess, &other.hess))
            .max(gap(&self.third, &other.third))
    }
}

pub fn derivatives_analytic(spec: &SemSpec, u: usize, z: &[f64]) -> Result<DerivativeBundle> {
    check_len(spec, z)?;
    if !spec.is_smooth() {
        return Err(CoreError::UnsupportedProfile(
            "exact derivatives need C³ mechanisms (tanh or linear)".into(),
        ));
    }
    let n = spec.n();
    let vars: Vec<Jet> = (0..n).map(|i| Jet::variable(n, i, z[i])).collect();
    let j = log_density_jet(spec, u, &vars)?;
    Ok(DerivativeBundle {
        point: z.to_vec(),
        env: u,
        grad: j.g,
        hess: j.h,
        third: j.t,
    })
}

/// Central-difference derivatives with truncation error O(h²).
///
/// Third derivatives use one stencil per sorted index pattern: the five-point
/// third difference for `(a,a,a)`, a central difference along `b` of the
/// second difference along `a` for `(a,a,b)`, and the eight-corner stencil for
/// distinct indices.
pub fn derivatives_fd(spec: &SemSpec, u: usize, z: &[f64], h: f64) -> Result<DerivativeBundle> {
    check_len(spec, z)?;
    spec.env(u)?;
    if !(h > 0.0) || !h.is_finite() || z.iter().any(|&x| x + h == x || x - h == x) {
        return Err(CoreError::StepUnderflow(h));
    }
    let n = spec.n();
    let f = |steps: &[(usize, f64)]| -> Result<f64> {
        let mut y = z.to_vec();
        for &(i, k) in steps {
            y[i] += k * h;
        }
        log_density(spec, u, &y)
    };
    let f0 = f(&[])?;
    let second_along = |a: usize, shift: &[(usize, f64)]| -> Result<f64> {
        let mut plus = shift.to_vec();
        plus.push((a, 1.0));
        let mut minus = shift.to_vec();
        minus.push((a, -1.0));
        Ok((f(&plus)? - 2.0 * f(shift)? + f(&minus)?) / (h * h))
    };

    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    let mut third = vec![0.0; n * n * n];
    for a in 0..n {
        grad[a] = (f(&[(a, 1.0)])? - f(&[(a, -1.0)])?) / (2.0 * h);
        hess[a * n + a] = (f(&[(a, 1.0)])? - 2.0 * f0 + f(&[(a, -1.0)])?) / (h * h);
        for b in a + 1..n {
            let v = (f(&[(a, 1.0), (b, 1.0)])? - f(&[(a, 1.0), (b, -1.0)])?
                - f(&[(a, -1.0), (b, 1.0)])?
                + f(&[(a, -1.0), (b, -1.0)])?)
                / (4.0 * h * h);
            hess[a * n + b] = v;
            hess[b * n + a] = v;
        }
    }
    let mut set = |idx: [usize; 3], v: f64| {
        for [p, q, r] in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            third[(idx[p] * n + idx[q]) * n + idx[r]] = v;
        }
    };
    for a in 0..n {
        let v = (f(&[(a, 2.0)])? - 2.0 * f(&[(a, 1.0)])? + 2.0 * f(&[(a, -1.0)])?
            - f(&[(a, -2.0)])?)
            / (2.0 * h * h * h);
        set([a, a, a], v);
        for b in 0..n {
            if b == a {
                continue;
            }
            let v = (second_along(a, &[(b, 1.0)])? - second_along(a, &[(b, -1.0)])?) / (2.0 * h);
            set([a, a, b], v);
        }
        for b in a + 1..n {
            for c in b + 1..n {
                let mut acc = 0.0;
                for sa in [1.0, -1.0] {
                    for sb in [1.0, -1.0] {
                        for sc in [1.0, -1.0] {
                            acc += sa * sb * sc * f(&[(a, sa), (b, sb), (c, sc)])?;
                        }
                    }
                }
                set([a, b, c], acc / (8.0 * h * h * h));
            }
        }
    }
    Ok(DerivativeBundle {
        point: z.to_vec(),
        env: u,
        grad,
        hess,
        third,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum DerivMethod {
    Analytic,
    FiniteDiff { h: f64 },
}

impl DerivMethod {
    pub fn bundle(self, spec: &SemSpec, u: usize, z: &[f64]) -> Result<DerivativeBundle> {
        match self {
            DerivMethod::Analytic => derivatives_analytic(spec, u, z),
            DerivMethod::FiniteDiff { h } => derivatives_fd(spec, u, z, h),
        }
    }
}

/// `count` points drawn from environment `u` of the model itself.
pub fn model_grid(spec: &SemSpec, u: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let z = sample_latents(spec, u, count, seed)?;
    Ok(z.data().chunks(spec.n().max(1)).take(count).map(<[f64]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMax {
    pub sink: usize,
    pub j: usize,
    pub max_abs: f64,
    /// Whether the lemma asserts this derivative vanishes.
    pub claimed_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma: String,
    pub spec_digest: String,
    pub tolerance: f64,
    pub method: DerivMethod,
    pub envs: Vec<usize>,
    pub grid_size: usize,
    pub per_pair_max_abs: Vec<PairMax>,
    pub pass: bool,
}

/// Max over environments and grid of `|∂³ log p / ∂z_i² ∂z_j|` for every sink
/// `i`. For additive noise the claim covers all `j`; with heteroscedastic noise
/// only non-parents of `i`, and parent pairs are reported unclaimed.
pub fn check_lemma_sink(
    spec: &SemSpec,
    envs: &[usize],
    grid: &[Vec<f64>],
    method: DerivMethod,
    tolerance: f64,
) -> Result<LemmaReport> {
    let n = spec.n();
    let sinks = spec.graph.sinks();
    let mut maxima = vec![0.0f64; n * n];
    for &u in envs {
        for z in grid {
            let b = method.bundle(spec, u, z)?;
            for &i in &sinks {
                for j in 0..n {
                    let v = b.third(i, i, j).abs();
                    maxima[i * n + j] = maxima[i * n + j].max(v);
                }
            }
        }
    }
    let mut pairs = Vec::new();
    for &i in &sinks {
        let parents = spec.graph.parents(i);
        for j in 0..n {
            let claimed_zero = match spec.model_class {
                ModelClass::Anm => true,
                ModelClass::Hnm => !parents.contains(&j),
            };
            pairs.push(PairMax {
                sink: i,
                j,
                max_abs: maxima[i * n + j],
                claimed_zero,
            });
        }
    }
    let pass = pairs
        .iter()
        .filter(|p| p.claimed_zero)
        .all(|p| p.max_abs <= tolerance);
    Ok(LemmaReport {
        lemma: match spec.model_class {
            ModelClass::Anm => "anm_sink_third_derivative".into(),
            ModelClass::Hnm => "hnm_sink_nonparent_third_derivative".into(),
        },
        spec_digest: spec.digest(),
        tolerance,
        method,
        envs: envs.to_vec(),
        grid_size: grid.len(),
        per_pair_max_abs: pairs,
        pass,
    })
}

/// Undirected graph with an edge wherever some environment and grid point has
/// a cross second derivative above `tolerance`.
pub fn markov_network_from_density(
    spec: &SemSpec,
    envs: &[usize],
    grid: &[Vec<f64>],
    method: DerivMethod,
    tolerance: f64,
) -> Result<UGraph> {
    if grid.is_empty() {
        return Err(CoreError::InvalidConfig("empty grid".into()));
    }
    let n = spec.n();
    let mut g = UGraph::empty(n);
    for &u in envs {
        for z in grid {
            let b = method.bundle(spec, u, z)?;
            for i in 0..n {
                for j in i + 1..n {
                    if b.hess(i, j).abs() > tolerance {
                        g.set(i, j);
                    }
                }
            }
        }
    }
    Ok(g)
}
