//! Variational estimator: encoder/decoder MLPs, a structured Gaussian prior
//! over the latents with a gated strictly-lower-triangular adjacency, and
//! environment-conditioned prior means and scales.
//!
//! Observations are standardized with the global mean/std of the training
//! data; reported ELBO values include the log-Jacobian of that map, so they
//! are bounds on the density of the raw observations.

use std::fs;
use std::io::Write;
use std::path::Path;

use crl_autodiff::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, AutodiffError, ParamId, ParamStore, Tape, Tensor, Var,
    HALF_LN_2PI,
};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json, Observations};
use crate::graph::Dag;
use crate::rng::{derive_seed, seeded, stream};
use crate::{CoreError, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    /// Width of both hidden layers of the encoder and decoder.
    pub hidden: usize,
    pub prior_hidden: usize,
    pub env_hidden: usize,
    pub temperature: f64,
    pub threshold: f64,
    pub sigma_x2: f64,
    /// Initial gate logit; the default opens every gate slightly above 0.5.
    pub init_logit: f64,
    /// Feed the environment code to the prior mechanism nets as well, so
    /// `f̂_i` may differ across environments.
    pub env_mechanisms: bool,
    /// Initial bias of the encoder's log-variance outputs.
    pub init_log_var: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(0, 0, 0)
    }
}

impl ModelConfig {
    pub fn new(n: usize, d: usize, m: usize) -> Self {
        Self {
            n,
            d,
            m,
            hidden: 32,
            prior_hidden: 16,
            env_hidden: 16,
            temperature: 0.2,
            threshold: 0.5,
            sigma_x2: 0.01,
            init_logit: 0.2,
            env_mechanisms: true,
            init_log_var: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CoreError::InvalidConfig(msg.to_string()));
        if self.n == 0 || self.d == 0 || self.m == 0 {
            return bad("n, d and m must be positive");
        }
        if self.hidden == 0 || self.prior_hidden == 0 || self.env_hidden == 0 {
            return bad("hidden widths must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("gate temperature must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("gate threshold must lie in (0, 1)");
        }
        if !(self.sigma_x2 > 0.0) {
            return bad("observation variance must be positive");
        }
        if !self.init_logit.is_finite() {
            return bad("initial gate logit must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.0,
            lr: 1e-3,
            batch_size: 128,
            steps: 3000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CoreError::InvalidConfig(msg.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return bad("lambda1 and lambda2 must be finite and non-negative");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }
}

/// Previous-iteration adjacency for the Markov-consistency penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct MoralRef {
    /// Row-major `n × n`, entry `(i, j)` for edge `j → i`.
    pub prev: Vec<f64>,
    /// 1-based iteration index.
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub elbo: f64,
    pub sparsity: f64,
    pub moral: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub env: usize,
    pub elbo: f64,
    pub sparsity: f64,
    pub moral: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn resolve(store: &ParamStore, prefix: &str, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|l| Ok((store.id(&format!("{prefix}.{l}.w"))?, store.id(&format!("{prefix}.{l}.b"))?)))
            .collect::<std::result::Result<Vec<_>, AutodiffError>>()?;
        Ok(Self { layers })
    }

    fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let wv = t.param(store, w);
            let bv = t.param(store, b);
            h = t.affine(h, wv, bv)?;
            if k + 1 < self.layers.len() {
                h = t.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Ids {
    enc: Mlp,
    dec: Mlp,
    prior: Vec<Mlp>,
    env: Mlp,
    gates: ParamId,
}

impl Ids {
    fn resolve(store: &ParamStore, n: usize) -> Result<Self> {
        Ok(Self {
            enc: Mlp::resolve(store, "enc", 3)?,
            dec: Mlp::resolve(store, "dec", 3)?,
            prior: (0..n)
                .map(|i| Mlp::resolve(store, &format!("prior.{i}"), 3))
                .collect::<Result<_>>()?,
            env: Mlp::resolve(store, "env", 2)?,
            gates: store.id("gates")?,
        })
    }
}

/// Everything in `model.json` except the weights, which live in the
/// checkpoint next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    config: ModelConfig,
    gate_logits: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
    frozen: Vec<Vec<bool>>,
    pinned: Vec<Vec<f64>>,
    frozen_nodes: Vec<usize>,
    x_mean: Vec<f64>,
    x_std: Vec<f64>,
    graph: Dag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrlModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Gate entries held at `pinned`, row-major `n × n`.
    frozen: Vec<bool>,
    pinned: Vec<f64>,
    frozen_nodes: Vec<bool>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    ids: Ids,
}

fn glorot(rng: &mut impl RngCore, fan_in: usize, fan_out: usize) -> Tensor {
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-r..=r)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized")
}

fn insert_mlp(store: &mut ParamStore, rng: &mut impl RngCore, prefix: &str, widths: &[usize]) {
    for (l, w) in widths.windows(2).enumerate() {
        store.insert(format!("{prefix}.{l}.w"), glorot(rng, w[0], w[1]));
        store.insert(format!("{prefix}.{l}.b"), Tensor::zeros(&[1, w[1]]));
    }
}

/// Column means and standard deviations; constant columns get scale 1.
pub fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = x.dims2().unwrap_or((0, 0));
    let mut mean = vec![0.0; cols];
    let mut std = vec![1.0; cols];
    if rows == 0 {
        return (mean, std);
    }
    for row in x.data().chunks(cols) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for row in x.data().chunks(cols) {
        for c in 0..cols {
            var[c] += (row[c] - mean[c]).powi(2);
        }
    }
    for c in 0..cols {
        let s = (var[c] / rows as f64).sqrt();
        if s > 1e-12 && s.is_finite() {
            std[c] = s;
        }
    }
    (mean, std)
}

fn standard_normal(rng: &mut impl RngCore, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl CrlModel {
    /// Fresh model with standardization statistics taken from `obs`.
    pub fn init(config: ModelConfig, obs: &Observations, seed: u64) -> Result<Self> {
        if obs.d != config.d || obs.m() != config.m {
            return Err(CoreError::DimensionMismatch(format!(
                "data has d={} m={}, model expects d={} m={}",
                obs.d,
                obs.m(),
                config.d,
                config.m
            )));
        }
        let (x_mean, x_std) = column_stats(&obs.stacked());
        Self::with_stats(config, x_mean, x_std, seed)
    }

    pub fn with_stats(config: ModelConfig, x_mean: Vec<f64>, x_std: Vec<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        if x_mean.len() != config.d || x_std.len() != config.d {
            return Err(CoreError::DimensionMismatch("standardization statistics".into()));
        }
        let n = config.n;
        let params = Self::fresh_params(&config, seed);
        let ids = Ids::resolve(&params, n)?;
        Ok(Self {
            params,
            frozen: vec![false; n * n],
            pinned: vec![0.0; n * n],
            frozen_nodes: vec![false; n],
            x_mean,
            x_std,
            ids,
            config,
        })
    }

    fn fresh_params(c: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = seeded(derive_seed(seed, "init"));
        let mut store = ParamStore::new();
        let (n, h) = (c.n, c.hidden);
        insert_mlp(&mut store, &mut rng, "enc", &[c.d, h, h, 2 * n]);
        let lv_bias = store.id("enc.2.b").expect("just inserted");
        store.get_mut(lv_bias).data_mut()[n..].fill(c.init_log_var);
        insert_mlp(&mut store, &mut rng, "dec", &[n, h, h, c.d]);
        let prior_in = if c.env_mechanisms { n + c.m } else { n };
        for i in 0..n {
            insert_mlp(&mut store, &mut rng, &format!("prior.{i}"), &[prior_in, c.prior_hidden, c.prior_hidden, 1]);
        }
        insert_mlp(&mut store, &mut rng, "env", &[c.m, c.env_hidden, 2 * n]);
        let mut logits = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..i {
                logits.set2(i, j, c.init_logit);
            }
        }
        store.insert("gates", logits);
        store
    }

    /// Replaces every weight with a fresh draw, keeping the frozen gate set,
    /// pinned values and standardization.
    pub fn reinitialize(&mut self, seed: u64) {
        self.params = Self::fresh_params(&self.config, seed);
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn is_frozen(&self, i: usize, j: usize) -> bool {
        self.frozen[i * self.n() + j]
    }

    pub fn frozen_nodes(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.frozen_nodes[i]).collect()
    }

    /// Free gate entries: strictly lower triangular and not pinned.
    fn free_mask(&self) -> Vec<f64> {
        let n = self.n();
        (0..n * n)
            .map(|k| if k / n > k % n && !self.frozen[k] { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn gate_logits(&self) -> &Tensor {
        self.params.get(self.ids.gates)
    }

    /// Gate values `Â`, row-major `n × n`.
    pub fn gate_values(&self) -> Vec<f64> {
        let inv_t = 1.0 / self.config.temperature;
        let free = self.free_mask();
        self.gate_logits()
            .data()
            .iter()
            .zip(free)
            .zip(&self.pinned)
            .map(|((&g, f), &p)| sigmoid(g * inv_t) * f + p)
            .collect()
    }

    /// Pins gate `(i, j)` (strictly lower) to `value`.
    pub fn freeze_gate(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        let n = self.n();
        if i >= n || j >= i {
            return Err(CoreError::InvalidConfig(format!("gate ({i},{j}) is not strictly lower triangular")));
        }
        self.frozen[i * n + j] = true;
        self.pinned[i * n + j] = value;
        Ok(())
    }

    /// Freezes the whole row and column of node `p`.
    pub fn freeze_node(&mut self, p: usize) -> Result<()> {
        let n = self.n();
        if p >= n {
            return Err(CoreError::InvalidNode { node: p, n });
        }
        // Pinned at their trained values: the thresholded edge set is kept and
        // the model computes the same function it was trained as.
        let a = self.gate_values();
        for j in 0..p {
            if !self.is_frozen(p, j) {
                self.freeze_gate(p, j, a[p * n + j])?;
            }
        }
        for i in p + 1..n {
            if !self.is_frozen(i, p) {
                self.freeze_gate(i, p, a[i * n + p])?;
            }
        }
        self.frozen_nodes[p] = true;
        Ok(())
    }

    pub fn read_graph(&self, threshold: f64) -> Dag {
        let n = self.n();
        let a = self.gate_values();
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .filter(|&(i, j)| a[i * n + j] > threshold)
            .collect();
        Dag::new(n, &edges).expect("strictly lower-triangular support is acyclic")
    }

    /// Thresholded adjacency as a 0/1 matrix.
    pub fn binary_adjacency(&self) -> Vec<f64> {
        let thr = self.config.threshold;
        self.gate_values().into_iter().map(|v| if v > thr { 1.0 } else { 0.0 }).collect()
    }

    pub fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = x.dims2().unwrap_or((0, 0));
        if cols != self.config.d {
            return Err(CoreError::DimensionMismatch(format!(
                "observations have {cols} columns, model expects {}",
                self.config.d
            )));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for c in 0..cols {
                row[c] = (row[c] - self.x_mean[c]) / self.x_std[c];
            }
        }
        debug_assert_eq!(out.shape()[0], rows);
        Ok(out)
    }

    fn log_jacobian(&self) -> f64 {
        self.x_std.iter().map(|s| s.ln()).sum()
    }

    fn gate_var(&self, t: &mut Tape) -> Result<Var> {
        let n = self.n();
        let g = t.param(&self.params, self.ids.gates);
        let s = t.scale(g, 1.0 / self.config.temperature);
        let s = t.sigmoid(s);
        let free = t.leaf(Tensor::matrix(n, n, self.free_mask())?);
        let pinned = t.leaf(Tensor::matrix(n, n, self.pinned.clone())?);
        let masked = t.mul(s, free)?;
        Ok(t.add(masked, pinned)?)
    }

    fn identity_plus(&self, t: &mut Tape, a: Var) -> Result<Var> {
        let eye = t.leaf(Tensor::identity(self.n()));
        Ok(t.add(a, eye)?)
    }

    fn sparsity_var(&self, t: &mut Tape, a: Var) -> Result<Var> {
        let ia = self.identity_plus(t, a)?;
        let iat = t.transpose(ia)?;
        let prod = t.matmul(iat, ia)?;
        let abs = t.abs(prod);
        Ok(t.sum(abs))
    }

    fn moral_var(&self, t: &mut Tape, a: Var, r: Option<&MoralRef>) -> Result<Var> {
        let n = self.n();
        let Some(r) = r else { return Ok(t.constant(0.0)) };
        if r.prev.len() != n * n {
            return Err(CoreError::DimensionMismatch(format!(
                "previous adjacency has {} entries, expected {}",
                r.prev.len(),
                n * n
            )));
        }
        if r.t < 2 {
            return Ok(t.constant(0.0));
        }
        let ia = self.identity_plus(t, a)?;
        let lo = (n + 2).saturating_sub(r.t).max(1);
        let mut acc: Option<Var> = None;
        for k in lo..=n {
            let sub = t.slice(ia, (0, k), (0, k))?;
            let subt = t.transpose(sub)?;
            let prod = t.matmul(subt, sub)?;
            let target = t.leaf(gram_leading(&r.prev, n, k));
            let diff = t.sub(prod, target)?;
            let sq = t.square(diff);
            let term = t.sum(sq);
            acc = Some(match acc {
                None => term,
                Some(prev) => t.add(prev, term)?,
            });
        }
        Ok(acc.unwrap_or_else(|| t.constant(0.0)))
    }

    /// Mean negative ELBO over a standardized batch with fixed noise `eps`.
    fn elbo_var(&self, t: &mut Tape, x: &Tensor, eps: &Tensor, u: usize, a: Var) -> Result<Var> {
        let c = &self.config;
        let n = c.n;
        if u >= c.m {
            return Err(CoreError::EnvOutOfRange { env: u, m: c.m });
        }
        let (b, _) = x.dims2().unwrap_or((0, 0));
        if eps.shape() != [b, n] {
            return Err(CoreError::DimensionMismatch("noise shape".into()));
        }
        let xv = t.leaf(x.clone());
        let h = self.ids.enc.forward(t, &self.params, xv)?;
        let mu = t.slice_cols(h, 0, n)?;
        let lv = t.slice_cols(h, n, 2 * n)?;
        let half_lv = t.scale(lv, 0.5);
        let sd = t.exp(half_lv);
        let ev = t.leaf(eps.clone());
        let noise = t.mul(sd, ev)?;
        let z = t.add(mu, noise)?;

        let xhat = self.ids.dec.forward(t, &self.params, z)?;
        let lvx = t.constant(c.sigma_x2.ln());
        let rec = t.gaussian_nll(xv, xhat, lvx)?;
        let rec = t.sum(rec);

        // log q(z|x) = −Σ(½ε² + ½ log var + ½ log 2π)
        let eps_sq: f64 = eps.data().iter().map(|e| 0.5 * e * e).sum();
        let ent = t.sum(half_lv);
        let log_q = t.add_const(ent, eps_sq + (b * n) as f64 * HALF_LN_2PI);
        let log_q = t.scale(log_q, -1.0);

        let mut onehot = vec![0.0; c.m];
        onehot[u] = 1.0;
        let codes = c
            .env_mechanisms
            .then(|| t.leaf(Tensor::matrix(b, c.m, onehot.repeat(b)).expect("sized")));
        let mut fs = Vec::with_capacity(n);
        for i in 0..n {
            let row = t.slice(a, (i, i + 1), (0, n))?;
            let masked = t.mul(z, row)?;
            let input = match codes {
                Some(cv) => t.concat_cols(&[masked, cv])?,
                None => masked,
            };
            fs.push(self.ids.prior[i].forward(t, &self.params, input)?);
        }
        let f = t.concat_cols(&fs)?;
        let code = t.leaf(Tensor::row_vector(onehot));
        let e = self.ids.env.forward(t, &self.params, code)?;
        let mu_e = t.slice_cols(e, 0, n)?;
        let log_sd = t.slice_cols(e, n, 2 * n)?;
        let lv_p = t.scale(log_sd, 2.0);
        let mean_p = t.add(f, mu_e)?;
        let prior = t.gaussian_nll(z, mean_p, lv_p)?;
        let prior = t.sum(prior);

        let kl = t.add(log_q, prior)?;
        let neg = t.add(rec, kl)?;
        let per_sample = t.scale(neg, 1.0 / b.max(1) as f64);
        Ok(t.add_const(per_sample, self.log_jacobian()))
    }

    /// Records the full objective; returns `(total, elbo, sparsity, moral)`.
    fn objective(
        &self,
        t: &mut Tape,
        x: &Tensor,
        eps: &Tensor,
        u: usize,
        lambda1: f64,
        lambda2: f64,
        moral: Option<&MoralRef>,
    ) -> Result<[Var; 4]> {
        let a = self.gate_var(t)?;
        let elbo = self.elbo_var(t, x, eps, u, a)?;
        let sp = self.sparsity_var(t, a)?;
        let mo = self.moral_var(t, a, moral)?;
        let sp_w = t.scale(sp, lambda1);
        let mo_w = t.scale(mo, lambda2);
        let partial = t.add(elbo, sp_w)?;
        let total = t.add(partial, mo_w)?;
        Ok([total, elbo, sp, mo])
    }

    /// Loss terms on raw observations `x` from environment `u` with the given
    /// reparameterization noise (`rows × n`).
    pub fn loss_terms_with_noise(
        &self,
        x: &Tensor,
        u: usize,
        eps: &Tensor,
        lambda1: f64,
        lambda2: f64,
        moral: Option<&MoralRef>,
    ) -> Result<LossTerms> {
        let xs = self.standardize(x)?;
        let mut t = Tape::new();
        let [total, elbo, sp, mo] = self.objective(&mut t, &xs, eps, u, lambda1, lambda2, moral)?;
        Ok(LossTerms {
            elbo: t.value(elbo).item(),
            sparsity: t.value(sp).item(),
            moral: t.value(mo).item(),
            total: t.value(total).item(),
        })
    }

    pub fn total_loss(
        &self,
        x: &Tensor,
        u: usize,
        cfg: &TrainConfig,
        moral: Option<&MoralRef>,
        noise_seed: u64,
    ) -> Result<LossTerms> {
        let rows = x.shape()[0];
        let eps = standard_normal(&mut seeded(noise_seed), rows, self.n());
        self.loss_terms_with_noise(x, u, &eps, cfg.lambda1, cfg.lambda2, moral)
    }

    /// Single-sample negative ELBO, averaged over the rows of `x`.
    pub fn elbo_loss(&self, x: &Tensor, u: usize, noise_seed: u64) -> Result<f64> {
        let rows = x.shape()[0];
        let eps = standard_normal(&mut seeded(noise_seed), rows, self.n());
        Ok(self.loss_terms_with_noise(x, u, &eps, 0.0, 0.0, None)?.elbo)
    }

    pub fn sparsity_loss(&self) -> f64 {
        let mut t = Tape::new();
        let a = self.gate_var(&mut t).expect("gate shapes are consistent");
        let s = self.sparsity_var(&mut t, a).expect("square matrices");
        t.value(s).item()
    }

    pub fn moral_loss(&self, prev: &[f64], iteration: usize) -> Result<f64> {
        let mut t = Tape::new();
        let a = self.gate_var(&mut t)?;
        let r = MoralRef { prev: prev.to_vec(), t: iteration };
        let v = self.moral_var(&mut t, a, Some(&r))?;
        Ok(t.value(v).item())
    }

    /// Gradient of the objective with respect to every parameter, in store order.
    pub fn gradients(
        &self,
        x: &Tensor,
        u: usize,
        eps: &Tensor,
        lambda1: f64,
        lambda2: f64,
        moral: Option<&MoralRef>,
    ) -> Result<(LossTerms, Vec<Tensor>)> {
        let xs = self.standardize(x)?;
        let mut t = Tape::new();
        let [total, elbo, sp, mo] = self.objective(&mut t, &xs, eps, u, lambda1, lambda2, moral)?;
        let terms = LossTerms {
            elbo: t.value(elbo).item(),
            sparsity: t.value(sp).item(),
            moral: t.value(mo).item(),
            total: t.value(total).item(),
        };
        let g = t.backward(total)?;
        Ok((terms, g.param_grads(&t, &self.params)))
    }

    fn adam(&self, lr: f64) -> AdamState {
        let mut adam = AdamState::new(AdamConfig { lr, ..AdamConfig::default() }, &self.params);
        let free = self.free_mask();
        adam.freeze(self.ids.gates, free.iter().map(|&f| f == 0.0).collect());
        adam
    }

    /// Minibatch Adam, one environment per step in round-robin order. Gate
    /// entries outside the free set never move.
    pub fn train(&mut self, obs: &Observations, cfg: &TrainConfig, moral: Option<&MoralRef>) -> Result<Vec<HistoryRow>> {
        cfg.validate()?;
        let c = self.config.clone();
        if obs.m() != c.m || obs.d != c.d {
            return Err(CoreError::DimensionMismatch(format!(
                "data has d={} m={}, model expects d={} m={}",
                obs.d,
                obs.m(),
                c.d,
                c.m
            )));
        }
        if let Some(u) = (0..c.m).find(|&u| obs.rows(u) == 0) {
            return Err(CoreError::InvalidConfig(format!("environment {u} has no samples")));
        }
        let envs = obs.envs.iter().map(|x| self.standardize(x)).collect::<Result<Vec<_>>>()?;
        let mut adam = self.adam(cfg.lr);
        let mut rng = seeded(derive_seed(cfg.seed, "train"));
        let b = cfg.batch_size;
        let mut history = Vec::with_capacity(cfg.steps);
        let mut batch = vec![0.0; b * c.d];
        for step in 0..cfg.steps {
            let u = step % c.m;
            let src = envs[u].data();
            let rows = envs[u].shape()[0];
            for r in 0..b {
                let k = rng.random_range(0..rows);
                batch[r * c.d..(r + 1) * c.d].copy_from_slice(&src[k * c.d..(k + 1) * c.d]);
            }
            let x = Tensor::matrix(b, c.d, batch.clone())?;
            let eps = standard_normal(&mut rng, b, c.n);
            let mut t = Tape::new();
            let [total, elbo, sp, mo] = self.objective(&mut t, &x, &eps, u, cfg.lambda1, cfg.lambda2, moral)?;
            let row = HistoryRow {
                step,
                env: u,
                elbo: t.value(elbo).item(),
                sparsity: t.value(sp).item(),
                moral: t.value(mo).item(),
                total: t.value(total).item(),
            };
            if !row.total.is_finite() {
                return Err(CoreError::NumericalAbort { step });
            }
            let grads = t.backward(total)?.param_grads(&t, &self.params);
            match adam.step(&mut self.params, &grads) {
                Ok(()) => {}
                Err(AutodiffError::NonFiniteGradient(_)) => return Err(CoreError::NumericalAbort { step }),
                Err(e) => return Err(e.into()),
            }
            history.push(row);
        }
        Ok(history)
    }

    /// Negative ELBO averaged over environments, each on its first
    /// `rows_per_env` samples with noise fixed by `seed`.
    pub fn final_elbo(&self, obs: &Observations, rows_per_env: usize, seed: u64) -> Result<f64> {
        let base = derive_seed(seed, "final-elbo");
        let mut acc = 0.0;
        for u in 0..obs.m() {
            let rows = obs.rows(u).min(rows_per_env);
            let x = Tensor::matrix(rows, obs.d, obs.envs[u].data()[..rows * obs.d].to_vec())?;
            let eps = standard_normal(&mut stream(base, u as u64), rows, self.n());
            acc += self.loss_terms_with_noise(&x, u, &eps, 0.0, 0.0, None)?.elbo;
        }
        Ok(acc / obs.m() as f64)
    }

    /// Posterior means and log-variances for raw observations.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let xs = self.standardize(x)?;
        let mut t = Tape::new();
        let xv = t.leaf(xs);
        let h = self.ids.enc.forward(&mut t, &self.params, xv)?;
        let mu = t.slice_cols(h, 0, self.n())?;
        let lv = t.slice_cols(h, self.n(), 2 * self.n())?;
        Ok((t.value(mu).clone(), t.value(lv).clone()))
    }

    pub fn encode_means(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode(x)?.0)
    }

    /// Relabels latent positions: new position `k` takes what was at
    /// `order[k]`. Encoder outputs, decoder inputs, prior nets (and their
    /// inputs), environment outputs and gates move together. Gate values
    /// belong to unordered node pairs and are stored at the lower-triangular
    /// slot of the new positions, so a pair whose order flips is reoriented.
    pub fn permute(&mut self, order: &[usize]) -> Result<()> {
        let n = self.n();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&o| o >= n || std::mem::replace(&mut seen[o], true)) {
            return Err(CoreError::NotAPermutation(order.to_vec()));
        }
        if let Some(k) = (0..n).find(|&k| (self.frozen_nodes[k] || self.frozen_nodes[order[k]]) && order[k] != k) {
            return Err(CoreError::InvalidConfig(format!("position {k} is frozen and cannot be moved")));
        }
        let both: Vec<usize> = order.iter().copied().chain(order.iter().map(|&o| o + n)).collect();

        let (w, b) = self.ids.enc.layers[2];
        permute_cols(self.params.get_mut(w), &both);
        permute_cols(self.params.get_mut(b), &both);
        let (w, b) = self.ids.env.layers[1];
        permute_cols(self.params.get_mut(w), &both);
        permute_cols(self.params.get_mut(b), &both);
        let (w, _) = self.ids.dec.layers[0];
        permute_rows(self.params.get_mut(w), order);

        let old: Vec<Vec<Tensor>> = self
            .ids
            .prior
            .iter()
            .map(|net| {
                net.layers
                    .iter()
                    .flat_map(|&(w, b)| [self.params.get(w).clone(), self.params.get(b).clone()])
                    .collect()
            })
            .collect();
        for k in 0..n {
            let net = self.ids.prior[k].clone();
            for (l, &(w, b)) in net.layers.iter().enumerate() {
                *self.params.get_mut(w) = old[order[k]][2 * l].clone();
                *self.params.get_mut(b) = old[order[k]][2 * l + 1].clone();
            }
            permute_rows(self.params.get_mut(net.layers[0].0), order);
        }

        let pair_src = |a: usize, c: usize| -> usize {
            let (x, y) = (order[a], order[c]);
            if x > y {
                x * n + y
            } else {
                y * n + x
            }
        };
        let logits = self.params.get(self.ids.gates).data().to_vec();
        let (frozen, pinned) = (self.frozen.clone(), self.pinned.clone());
        let g = self.params.get_mut(self.ids.gates).data_mut();
        for a in 0..n {
            for c in 0..a {
                let s = pair_src(a, c);
                g[a * n + c] = logits[s];
                self.frozen[a * n + c] = frozen[s];
                self.pinned[a * n + c] = pinned[s];
            }
        }
        let fnodes = self.frozen_nodes.clone();
        for k in 0..n {
            self.frozen_nodes[k] = fnodes[order[k]];
        }
        Ok(())
    }

    /// Transposition of positions `i` and `j`.
    pub fn apply_swap(&mut self, i: usize, j: usize) -> Result<()> {
        let n = self.n();
        if i >= n || j >= n {
            return Err(CoreError::InvalidNode { node: i.max(j), n });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.swap(i, j);
        self.permute(&order)
    }

    /// Writes `model.json` plus the weight checkpoint `params.{bin,json}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let n = self.n();
        let to_rows = |v: &[f64]| v.chunks(n).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let file = ModelFile {
            config: self.config.clone(),
            gate_logits: to_rows(self.gate_logits().data()),
            gates: to_rows(&self.gate_values()),
            frozen: self.frozen.chunks(n).map(<[bool]>::to_vec).collect(),
            pinned: to_rows(&self.pinned),
            frozen_nodes: self.frozen_nodes(),
            x_mean: self.x_mean.clone(),
            x_std: self.x_std.clone(),
            graph: self.read_graph(self.config.threshold),
        };
        write_json(&dir.join("model.json"), &file)?;
        save_checkpoint(&self.params, dir, "params")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file: ModelFile = read_json(&dir.join("model.json"))?;
        file.config.validate()?;
        let n = file.config.n;
        let params = load_checkpoint(dir, "params")?;
        let ids = Ids::resolve(&params, n)?;
        let mut frozen_nodes = vec![false; n];
        for &k in &file.frozen_nodes {
            *frozen_nodes
                .get_mut(k)
                .ok_or(CoreError::InvalidNode { node: k, n })? = true;
        }
        let frozen: Vec<bool> = file.frozen.concat();
        let pinned: Vec<f64> = file.pinned.concat();
        if frozen.len() != n * n || pinned.len() != n * n {
            return Err(CoreError::Parse("model.json gate tables have the wrong size".into()));
        }
        Ok(Self {
            config: file.config,
            params,
            frozen,
            pinned,
            frozen_nodes,
            x_mean: file.x_mean,
            x_std: file.x_std,
            ids,
        })
    }
}

/// `(I + A)ᵀ(I + A)` restricted to the leading `k × k` block.
fn gram_leading(a: &[f64], n: usize, k: usize) -> Tensor {
    let ia = |i: usize, j: usize| a[i * n + j] + if i == j { 1.0 } else { 0.0 };
    let mut out = Tensor::zeros(&[k, k]);
    for r in 0..k {
        for c in 0..k {
            out.set2(r, c, (0..k).map(|p| ia(p, r) * ia(p, c)).sum());
        }
    }
    out
}

fn permute_cols(t: &mut Tensor, map: &[usize]) {
    let (rows, cols) = t.dims2().expect("matrix");
    let old = t.data().to_vec();
    let d = t.data_mut();
    for r in 0..rows {
        for (c, &src) in map.iter().enumerate() {
            d[r * cols + c] = old[r * cols + src];
        }
    }
}

fn permute_rows(t: &mut Tensor, map: &[usize]) {
    let (_, cols) = t.dims2().expect("matrix");
    let old = t.data().to_vec();
    let d = t.data_mut();
    for (r, &src) in map.iter().enumerate() {
        d[r * cols..(r + 1) * cols].copy_from_slice(&old[src * cols..(src + 1) * cols]);
    }
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut out = Vec::with_capacity(rows.len() * 64);
    writeln!(out, "step,env,elbo,sparsity,moral,total")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.step, r.env, r.elbo, r.sparsity, r.moral, r.total)?;
    }
    fs::write(path, out)?;
    Ok(())
}
