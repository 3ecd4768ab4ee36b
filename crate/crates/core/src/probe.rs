//! Second derivatives of a log-density under a smooth reparametrization,
//! computed directly and through the chain rule that splits them into
//! Markov-edge terms.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::{derivatives_analytic, log_density, log_density_jet};
use crate::jet::Jet;
use crate::scm::SemSpec;
use crate::{rng, CoreError, Result};

/// `v(ẑ) = a(W ẑ + b)` with orthonormal `W` and `a(x) = x + c·tanh(x)`,
/// which is strictly increasing for `c > −1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffeoProbe {
    pub n: usize,
    /// Row-major `n × n`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

impl DiffeoProbe {
    pub fn identity(n: usize) -> Self {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Self {
            n,
            w,
            b: vec![0.0; n],
            c: 0.0,
        }
    }

    /// Random orthonormal `W` and bias; `c = 0` gives an affine probe.
    pub fn random(n: usize, c: f64, seed: u64) -> Result<Self> {
        if c <= -1.0 {
            return Err(CoreError::InvalidConfig(format!("probe curvature {c} must exceed -1")));
        }
        let mut r = rng::seeded(seed);
        let raw = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..=1.0));
        let q = raw.qr().q();
        let w = (0..n * n).map(|k| q[(k / n, k % n)]).collect();
        let b = (0..n).map(|_| r.random_range(-0.5..=0.5)).collect();
        Ok(Self { n, w, b, c })
    }

    fn pre(&self, zh: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).fold(self.b[i], |acc, k| acc + self.w[i * self.n + k] * zh[k]))
            .collect()
    }

    pub fn apply(&self, zh: &[f64]) -> Vec<f64> {
        self.pre(zh).into_iter().map(|s| s + self.c * s.tanh()).collect()
    }

    /// `a'`, `a''`, `a'''` at `s`.
    fn act_derivs(&self, s: f64) -> (f64, f64, f64) {
        let t = s.tanh();
        let sech2 = 1.0 - t * t;
        (
            1.0 + self.c * sech2,
            -2.0 * self.c * t * sech2,
            -2.0 * self.c * sech2 * (1.0 - 3.0 * t * t),
        )
    }

    /// `J[i][k] = ∂z_i/∂ẑ_k`.
    pub fn jacobian(&self, zh: &[f64]) -> Vec<f64> {
        let n = self.n;
        let s = self.pre(zh);
        let mut j = vec![0.0; n * n];
        for i in 0..n {
            let (d1, _, _) = self.act_derivs(s[i]);
            for k in 0..n {
                j[i * n + k] = d1 * self.w[i * n + k];
            }
        }
        j
    }

    /// `∂²z_i/∂ẑ_k∂ẑ_l`, indexed `[(i*n + k)*n + l]`.
    pub fn second(&self, zh: &[f64]) -> Vec<f64> {
        let n = self.n;
        let s = self.pre(zh);
        let mut out = vec![0.0; n * n * n];
        for i in 0..n {
            let (_, d2, _) = self.act_derivs(s[i]);
            for k in 0..n {
                for l in 0..n {
                    out[(i * n + k) * n + l] = d2 * self.w[i * n + k] * self.w[i * n + l];
                }
            }
        }
        out
    }

    /// Hessian of `log|det J_v|` in `ẑ`. The orthonormal factor contributes
    /// a constant, so only the activation terms remain.
    pub fn log_det_hessian(&self, zh: &[f64]) -> Vec<f64> {
        let n = self.n;
        let s = self.pre(zh);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let (d1, d2, d3) = self.act_derivs(s[i]);
            let curv = d3 / d1 - (d2 / d1) * (d2 / d1);
            for k in 0..n {
                for l in 0..n {
                    out[k * n + l] += curv * self.w[i * n + k] * self.w[i * n + l];
                }
            }
        }
        out
    }

    pub fn log_abs_det(&self, zh: &[f64]) -> f64 {
        let s = self.pre(zh);
        s.iter().map(|&si| self.act_derivs(si).0.ln()).sum()
    }

    /// `v` as jets in the variables `ẑ`, plus the jet of `log|det J_v|`.
    pub fn jets(&self, zh: &[f64]) -> (Vec<Jet>, Jet) {
        let n = self.n;
        let vars: Vec<Jet> = (0..n).map(|k| Jet::variable(n, k, zh[k])).collect();
        let mut out = Vec::with_capacity(n);
        let mut logdet = Jet::constant(n, 0.0);
        for i in 0..n {
            let mut s = Jet::constant(n, self.b[i]);
            for (k, v) in vars.iter().enumerate() {
                s.axpy(self.w[i * n + k], v);
            }
            let t = s.tanh();
            out.push(s.add(&t.scale(self.c)));
            let slope = t.square().scale(-self.c).add_const(1.0 + self.c);
            logdet.axpy(1.0, &slope.ln());
        }
        (out, logdet)
    }
}

/// Log-density of `Ẑ = v⁻¹(Z)`: `log p(v(ẑ)) + log|det J_v(ẑ)|`.
pub fn pushforward_log_density(spec: &SemSpec, u: usize, probe: &DiffeoProbe, zh: &[f64]) -> Result<f64> {
    Ok(log_density(spec, u, &probe.apply(zh))? + probe.log_abs_det(zh))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "route", rename_all = "snake_case")]
pub enum ProbeRoute {
    /// Compose jets through the probe and the density.
    Jet,
    /// Fourth-order central differences of the pushforward log-density.
    FiniteDiff { h: f64 },
}

/// Hessian of the pushforward log-density in `ẑ`, row-major.
pub fn pushforward_hessian(
    spec: &SemSpec,
    u: usize,
    probe: &DiffeoProbe,
    zh: &[f64],
    route: ProbeRoute,
) -> Result<Vec<f64>> {
    let n = spec.n();
    match route {
        ProbeRoute::Jet => {
            let (z, logdet) = probe.jets(zh);
            Ok(log_density_jet(spec, u, &z)?.add(&logdet).h)
        }
        ProbeRoute::FiniteDiff { h } => {
            if !(h > 0.0) || zh.iter().any(|&x| x + h == x) {
                return Err(CoreError::StepUnderflow(h));
            }
            let f = |steps: &[(usize, f64)]| -> Result<f64> {
                let mut y = zh.to_vec();
                for &(i, k) in steps {
                    y[i] += k * h;
                }
                pushforward_log_density(spec, u, probe, &y)
            };
            let f0 = f(&[])?;
            let mut out = vec![0.0; n * n];
            for a in 0..n {
                out[a * n + a] = (-f(&[(a, 2.0)])? + 16.0 * f(&[(a, 1.0)])? - 30.0 * f0
                    + 16.0 * f(&[(a, -1.0)])?
                    - f(&[(a, -2.0)])?)
                    / (12.0 * h * h);
                for b in a + 1..n {
                    let cross = |k: f64| -> Result<f64> {
                        Ok((f(&[(a, k), (b, k)])? - f(&[(a, k), (b, -k)])?
                            - f(&[(a, -k), (b, k)])?
                            + f(&[(a, -k), (b, -k)])?)
                            / (4.0 * k * k * h * h))
                    };
                    let v = (4.0 * cross(1.0)? - cross(2.0)?) / 3.0;
                    out[a * n + b] = v;
                    out[b * n + a] = v;
                }
            }
            Ok(out)
        }
    }
}

/// Right-hand side of the chain rule: diagonal terms, cross terms restricted
/// to moral-graph edges, gradient curvature and the log-determinant Hessian.
pub fn chain_rule_hessian(spec: &SemSpec, u: usize, probe: &DiffeoProbe, zh: &[f64]) -> Result<Vec<f64>> {
    let n = spec.n();
    let z = probe.apply(zh);
    let b = derivatives_analytic(spec, u, &z)?;
    let jac = probe.jacobian(zh);
    let sec = probe.second(zh);
    let moral = spec.graph.moralize();
    let mut out = probe.log_det_hessian(zh);
    for k in 0..n {
        for l in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += b.hess(i, i) * jac[i * n + k] * jac[i * n + l];
                acc += b.grad[i] * sec[(i * n + k) * n + l];
            }
            for j in 0..n {
                for i in moral.neighbors(j) {
                    acc += b.hess(i, j) * jac[j * n + l] * jac[i * n + k];
                }
            }
            out[k * n + l] += acc;
        }
    }
    Ok(out)
}

/// Max absolute gap between the direct and chain-rule Hessians at `ẑ`.
pub fn chain_rule_probe(
    spec: &SemSpec,
    u: usize,
    probe: &DiffeoProbe,
    zh: &[f64],
    route: ProbeRoute,
) -> Result<f64> {
    if probe.n != spec.n() {
        return Err(CoreError::DimensionMismatch(format!(
            "probe on {} coordinates, model has {}",
            probe.n,
            spec.n()
        )));
    }
    let lhs = pushforward_hessian(spec, u, probe, zh, route)?;
    let rhs = chain_rule_hessian(spec, u, probe, zh)?;
    Ok(lhs
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
