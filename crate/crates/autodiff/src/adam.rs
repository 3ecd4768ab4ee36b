use serde::{Deserialize, Serialize};

use crate::{AutodiffError, ParamId, ParamStore, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Elements marked frozen are skipped entirely:
/// neither the value nor its moment accumulators are touched.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    frozen: Vec<Option<Vec<bool>>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .ids()
            .map(|id| Tensor::zeros(params.get(id).shape()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            frozen: vec![None; params.len()],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Marks elements of `id` that must never move. Their moments are reset.
    pub fn freeze(&mut self, id: ParamId, mask: Vec<bool>) {
        assert_eq!(mask.len(), self.m[id.0].numel());
        for (k, &f) in mask.iter().enumerate() {
            if f {
                self.m[id.0].data_mut()[k] = 0.0;
                self.v[id.0].data_mut()[k] = 0.0;
            }
        }
        self.frozen[id.0] = Some(mask);
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        assert_eq!(grads.len(), params.len());
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    left: params.get(id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let mask = self.frozen[id.0].as_deref();
            let bad = g
                .data()
                .iter()
                .enumerate()
                .any(|(k, x)| !x.is_finite() && !mask.is_some_and(|m| m[k]));
            if bad {
                return Err(AutodiffError::NonFiniteGradient(params.name(id).to_string()));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let mask = self.frozen[id.0].as_deref();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let theta = params.get_mut(id).data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                if mask.is_some_and(|mk| mk[k]) {
                    continue;
                }
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
