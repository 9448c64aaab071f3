//! Momentum SGD and Adam over a [`ParamStore`].
//!
//! Weight decay is the classical coupled form, applied as a gradient
//! addition before the momentum update. Non-trainable parameters are never
//! touched and carry no optimizer state.

use crate::autodiff::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Learning rate after `epoch` full epochs: halves at every multiple of
/// `halve_every` (epochs 0..halve_every-1 run at `base`).
pub fn lr_at(base: f64, epoch: usize, halve_every: usize) -> f64 {
    if halve_every == 0 {
        return base;
    }
    base * 0.5f64.powi((epoch / halve_every) as i32)
}

#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

pub struct Sgd {
    cfg: SgdConfig,
    ids: Vec<ParamId>,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, cfg: SgdConfig) -> Self {
        let velocity = ids
            .iter()
            .map(|id| Tensor::zeros(store.value(*id).shape()))
            .collect();
        Sgd { cfg, ids, velocity }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// v = momentum * v + (grad + wd * w); w -= lr * v
    pub fn step(&mut self, store: &mut ParamStore) {
        for (id, vel) in self.ids.iter().zip(self.velocity.iter_mut()) {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            let vd = vel.data_mut();
            let gd = p.grad.data();
            let wd = self.cfg.weight_decay;
            let vals = p.value.data_mut();
            for i in 0..vd.len() {
                vd[i] = self.cfg.momentum * vd[i] + (gd[i] + wd * vals[i]);
                vals[i] -= self.cfg.lr * vd[i];
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, cfg: AdamConfig) -> Self {
        let m = ids
            .iter()
            .map(|id| Tensor::zeros(store.value(*id).shape()))
            .collect();
        let v = ids
            .iter()
            .map(|id| Tensor::zeros(store.value(*id).shape()))
            .collect();
        Adam {
            cfg,
            ids,
            m,
            v,
            step: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for ((id, m), v) in self.ids.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = p.grad.data();
            let wd = self.cfg.weight_decay;
            let vals = p.value.data_mut();
            for i in 0..md.len() {
                let g = gd[i] + wd * vals[i];
                md[i] = self.cfg.beta1 * md[i] + (1.0 - self.cfg.beta1) * g;
                vd[i] = self.cfg.beta2 * vd[i] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                vals[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}
