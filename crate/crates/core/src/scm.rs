//! Synthetic multi-environment latent SEMs and injective mixing functions.

use std::fmt;

use crl_autodiff::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::Dag;
use crate::{rng, CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    LeakyRelu { slope: f64 },
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Identity => x,
        }
    }

    /// True when the activation is at least three times differentiable.
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::LeakyRelu { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelClass {
    Anm,
    Hnm,
}

impl fmt::Display for ModelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelClass::Anm => "anm",
            ModelClass::Hnm => "hnm",
        })
    }
}

/// Dense layer, `weights` is `outputs × inputs` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.inputs + inp]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).fold(self.bias[o], |acc, (w, v)| acc + w * v)
            })
            .collect()
    }
}

/// Small scalar-output feed-forward net. The activation is applied after
/// every layer except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismNet {
    pub activation: Activation,
    pub layers: Vec<DenseLayer>,
}

impl MechanismNet {
    /// `arity → hidden → 1` with every weight and bias drawn from Unif[−r, r].
    pub fn sample<R: Rng>(
        rng: &mut R,
        arity: usize,
        hidden: usize,
        activation: Activation,
        range: f64,
    ) -> Self {
        let mut layer = |inputs: usize, outputs: usize| DenseLayer {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.random_range(-range..=range))
                .collect(),
            bias: (0..outputs).map(|_| rng.random_range(-range..=range)).collect(),
        };
        let first = layer(arity, hidden);
        let second = layer(hidden, 1);
        Self {
            activation,
            layers: vec![first, second],
        }
    }

    /// `f(x) = w·x + b`.
    pub fn linear(weights: Vec<f64>, bias: f64) -> Self {
        Self {
            activation: Activation::Identity,
            layers: vec![DenseLayer {
                inputs: weights.len(),
                outputs: 1,
                weights,
                bias: vec![bias],
            }],
        }
    }

    pub fn constant(arity: usize, value: f64) -> Self {
        Self::linear(vec![0.0; arity], value)
    }

    pub fn arity(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn is_smooth(&self) -> bool {
        self.layers.len() == 1 || self.activation.is_smooth()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.arity());
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if k < last {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        h[0]
    }

    /// Sets every weight (not bias) to zero, turning the net into a constant.
    pub fn zero_weights(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
    }
}

pub const SCALE_FLOOR: f64 = 0.1;

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Parameters of one node's conditional in one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub mech: MechanismNet,
    pub noise_mean: f64,
    pub noise_std: f64,
    /// Present for heteroscedastic models: σ(pa) = softplus(net(pa)) + 0.1.
    pub scale_net: Option<MechanismNet>,
}

impl NodeParams {
    pub fn std_at(&self, pa: &[f64]) -> f64 {
        match &self.scale_net {
            Some(net) => softplus(net.eval(pa)) + SCALE_FLOOR,
            None => self.noise_std,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemConfig {
    pub hidden: usize,
    pub activation: Activation,
    pub weight_range: f64,
    pub noise_mean_range: (f64, f64),
    pub noise_std_range: (f64, f64),
}

impl Default for SemConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            activation: Activation::Tanh,
            weight_range: 2.0,
            noise_mean_range: (-1.0, 1.0),
            noise_std_range: (0.5, 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemSpec {
    pub graph: Dag,
    pub model_class: ModelClass,
    /// `envs[u][i]`.
    pub envs: Vec<Vec<NodeParams>>,
}

impl SemSpec {
    /// Builds a spec after validating arities and noise scales.
    pub fn new(graph: Dag, model_class: ModelClass, envs: Vec<Vec<NodeParams>>) -> Result<Self> {
        if envs.is_empty() {
            return Err(CoreError::InvalidConfig("at least one environment required".into()));
        }
        for (u, env) in envs.iter().enumerate() {
            if env.len() != graph.n() {
                return Err(CoreError::DimensionMismatch(format!(
                    "environment {u} has {} nodes, graph has {}",
                    env.len(),
                    graph.n()
                )));
            }
            for (i, p) in env.iter().enumerate() {
                let arity = graph.parents(i).len();
                let scale_ok = p.scale_net.as_ref().is_none_or(|s| s.arity() == arity);
                if p.mech.arity() != arity || !scale_ok {
                    return Err(CoreError::DimensionMismatch(format!(
                        "node {i} in environment {u}: net arity differs from parent count {arity}"
                    )));
                }
                if !(p.noise_std > 0.0) || !p.noise_mean.is_finite() {
                    return Err(CoreError::InvalidConfig(format!(
                        "node {i} in environment {u}: noise std must be positive"
                    )));
                }
                if (model_class == ModelClass::Hnm) != p.scale_net.is_some() {
                    return Err(CoreError::InvalidConfig(format!(
                        "node {i} in environment {u}: scale net presence must match model class"
                    )));
                }
            }
        }
        Ok(Self {
            graph,
            model_class,
            envs,
        })
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn m(&self) -> usize {
        self.envs.len()
    }

    pub fn node(&self, u: usize, i: usize) -> &NodeParams {
        &self.envs[u][i]
    }

    pub fn env(&self, u: usize) -> Result<&[NodeParams]> {
        self.envs
            .get(u)
            .map(Vec::as_slice)
            .ok_or(CoreError::EnvOutOfRange { env: u, m: self.m() })
    }

    /// True when every net is C³, so exact third derivatives exist.
    pub fn is_smooth(&self) -> bool {
        self.envs.iter().flatten().all(|p| {
            p.mech.is_smooth() && p.scale_net.as_ref().is_none_or(MechanismNet::is_smooth)
        })
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }

    /// Restriction to an ancestrally closed node set, relabelled in the
    /// order given. Because the set is closed, its joint density is the
    /// marginal of the full model.
    pub fn restrict(&self, nodes: &[usize]) -> Result<SemSpec> {
        let mut sorted = nodes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != nodes.len() {
            return Err(CoreError::InvalidConfig(format!("repeated node in {nodes:?}")));
        }
        if !self.graph.is_ancestrally_closed(nodes) {
            return Err(CoreError::NotAncestrallyClosed(nodes.to_vec()));
        }
        let graph = self.graph.induced_subdag(nodes)?;
        let envs = self
            .envs
            .iter()
            .map(|env| {
                nodes
                    .iter()
                    .enumerate()
                    .map(|(new, &old)| {
                        // Parent lists are ascending in both graphs; the
                        // relabelling may reorder them.
                        let old_pa = self.graph.parents(old);
                        let new_pa: Vec<usize> =
                            graph.parents(new).iter().map(|&p| nodes[p]).collect();
                        let mut p = env[old].clone();
                        if old_pa != new_pa {
                            let pos: Vec<usize> = new_pa
                                .iter()
                                .map(|q| old_pa.iter().position(|r| r == q).expect("closed"))
                                .collect();
                            p.mech = permute_inputs(&p.mech, &pos);
                            p.scale_net = p.scale_net.as_ref().map(|s| permute_inputs(s, &pos));
                        }
                        p
                    })
                    .collect()
            })
            .collect();
        Ok(SemSpec {
            graph,
            model_class: self.model_class,
            envs,
        })
    }
}

/// New net whose input `k` is the old net's input `pos[k]`.
fn permute_inputs(net: &MechanismNet, pos: &[usize]) -> MechanismNet {
    let mut out = net.clone();
    let first = &mut out.layers[0];
    let old = &net.layers[0];
    for o in 0..first.outputs {
        for (k, &p) in pos.iter().enumerate() {
            first.weights[o * first.inputs + k] = old.weight(o, p);
        }
    }
    out
}

/// SHA-256 of the compact JSON encoding.
pub fn digest_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(&bytes))
}

/// Draws per-environment mechanisms and noise parameters for `graph`.
pub fn sample_sem(
    graph: &Dag,
    m: usize,
    model_class: ModelClass,
    config: &SemConfig,
    seed: u64,
) -> Result<SemSpec> {
    if m == 0 {
        return Err(CoreError::InvalidConfig("at least one environment required".into()));
    }
    let mut r = rng::seeded(seed);
    let (mlo, mhi) = config.noise_mean_range;
    let (slo, shi) = config.noise_std_range;
    let mut envs = Vec::with_capacity(m);
    for _ in 0..m {
        let mut env = Vec::with_capacity(graph.n());
        for i in 0..graph.n() {
            let arity = graph.parents(i).len();
            let mech = MechanismNet::sample(
                &mut r,
                arity,
                config.hidden,
                config.activation,
                config.weight_range,
            );
            let noise_mean = r.random_range(mlo..=mhi);
            let noise_std = r.random_range(slo..=shi);
            let scale_net = (model_class == ModelClass::Hnm).then(|| {
                MechanismNet::sample(
                    &mut r,
                    arity,
                    config.hidden,
                    config.activation,
                    config.weight_range,
                )
            });
            env.push(NodeParams {
                mech,
                noise_mean,
                noise_std,
                scale_net,
            });
        }
        envs.push(env);
    }
    SemSpec::new(graph.clone(), model_class, envs)
}

/// Ancestral sampling of `count` rows from environment `u`. Environment `u`
/// reads its own stream of the generator seeded by `seed`.
pub fn sample_latents(spec: &SemSpec, u: usize, count: usize, seed: u64) -> Result<Tensor> {
    let env = spec.env(u)?;
    let n = spec.n();
    let order = spec.graph.topological_order().ok_or(CoreError::Cyclic)?;
    let parents: Vec<Vec<usize>> = (0..n).map(|i| spec.graph.parents(i)).collect();
    let mut r = rng::stream(seed, u as u64);
    let mut data = vec![0.0; count * n];
    let mut pa = Vec::with_capacity(n);
    for row in data.chunks_mut(n) {
        for &i in &order {
            pa.clear();
            pa.extend(parents[i].iter().map(|&p| row[p]));
            let p = &env[i];
            let eps: f64 = r.sample(StandardNormal);
            row[i] = p.mech.eval(&pa) + p.noise_mean + p.std_at(&pa) * eps;
        }
    }
    Ok(Tensor::new(&[count, n], data)?)
}

/// One mixing layer; `weights` is `outputs × inputs` row-major with
/// orthonormal columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingSpec {
    pub n: usize,
    pub d: usize,
    pub slope: f64,
    pub layers: Vec<MixingLayer>,
}

impl MixingSpec {
    /// `depth` layers `n → d → … → d`, weights from QR of a Unif[−1,1]
    /// matrix, biases Unif[−1,1].
    pub fn sample(n: usize, d: usize, depth: usize, slope: f64, seed: u64) -> Result<Self> {
        if d < n {
            return Err(CoreError::InvalidConfig(format!(
                "observed dimension {d} below latent dimension {n}"
            )));
        }
        if !(slope > 0.0 && slope < 1.0) {
            return Err(CoreError::InvalidConfig(format!("slope {slope} outside (0, 1)")));
        }
        if depth == 0 {
            return Err(CoreError::InvalidConfig("mixing needs at least one layer".into()));
        }
        let mut r = rng::seeded(seed);
        let mut layers = Vec::with_capacity(depth);
        for k in 0..depth {
            let inputs = if k == 0 { n } else { d };
            let raw = DMatrix::from_fn(d, inputs, |_, _| r.random_range(-1.0..=1.0));
            let q = raw.qr().q();
            let mut weights = Vec::with_capacity(d * inputs);
            for o in 0..d {
                for i in 0..inputs {
                    weights.push(q[(o, i)]);
                }
            }
            let bias = (0..d).map(|_| r.random_range(-1.0..=1.0)).collect();
            layers.push(MixingLayer {
                inputs,
                outputs: d,
                weights,
                bias,
            });
        }
        Ok(Self {
            n,
            d,
            slope,
            layers,
        })
    }

    pub fn apply_row(&self, z: &[f64]) -> Vec<f64> {
        let mut h = z.to_vec();
        for l in &self.layers {
            h = (0..l.outputs)
                .map(|o| {
                    let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                    let s = row.iter().zip(&h).fold(l.bias[o], |acc, (w, v)| acc + w * v);
                    if s >= 0.0 {
                        s
                    } else {
                        self.slope * s
                    }
                })
                .collect();
        }
        h
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

/// Row-wise mixing `X = g(Z)`.
pub fn mix(spec: &MixingSpec, z: &Tensor) -> Result<Tensor> {
    let (rows, cols) = dims(z)?;
    if cols != spec.n {
        return Err(CoreError::DimensionMismatch(format!(
            "mixing expects {} columns, got {cols}",
            spec.n
        )));
    }
    let mut out = Vec::with_capacity(rows * spec.d);
    for row in z.data().chunks(cols.max(1)).take(rows) {
        out.extend(spec.apply_row(row));
    }
    Ok(Tensor::new(&[rows, spec.d], out)?)
}

pub(crate) fn dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(CoreError::DimensionMismatch(format!("expected a matrix, got shape {s:?}"))),
    }
}
