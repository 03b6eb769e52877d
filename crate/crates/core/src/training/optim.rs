use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, ParamStore, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW<T: Real = f32> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> f64 {
        let norm = grads
            .params()
            .map(|(_, g)| g.data().iter().map(|&v| v.to_f64c().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads.params() {
            let i = id.index();
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k].to_f64c() * clip;
                let mk = c.beta1 * m[k].to_f64c() + (1.0 - c.beta1) * gk;
                let vk = c.beta2 * v[k].to_f64c() + (1.0 - c.beta2) * gk * gk;
                m[k] = T::from_f64c(mk);
                v[k] = T::from_f64c(vk);
                let mut pk = p[k].to_f64c();
                pk -= c.lr * c.weight_decay * pk;
                pk -= c.lr * (mk / bc1) / ((vk / bc2).sqrt() + c.eps);
                p[k] = T::from_f64c(pk);
            }
        }
        norm
    }
}
