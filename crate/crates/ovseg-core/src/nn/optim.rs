//! AdamW optimizer with decoupled weight decay.
//!
//! State is keyed by parameter path so the same optimizer instance can
//! be driven from a [`Visit`](super::param::Visit) walk in any order.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::param::Param;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug)]
struct Slot {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    /// Per-parameter step count; bias correction uses this, so params
    /// that join late (or are frozen for a while) stay well scaled.
    t: u64,
}

#[derive(Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: HashMap<String, Slot>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(AdamWConfig::default())
    }
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, state: HashMap::new() }
    }

    /// Applies one update to `param` from its accumulated gradient.
    /// Does not clear the gradient; callers zero grads per step.
    pub fn update(&mut self, name: &str, param: &mut Param, lr: f64) {
        let slot = self.state.entry(name.to_string()).or_insert_with(|| Slot {
            m: ArrayD::zeros(param.value.shape()),
            v: ArrayD::zeros(param.value.shape()),
            t: 0,
        });
        slot.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(slot.t as i32);
        let bc2 = 1.0 - b2.powi(slot.t as i32);

        azip(&mut slot.m, &param.grad, |m, g| *m = b1 * *m + (1.0 - b1) * g);
        azip(&mut slot.v, &param.grad, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);

        let eps = self.cfg.eps;
        let wd = self.cfg.weight_decay;
        ndarray::Zip::from(&mut param.value)
            .and(&slot.m)
            .and(&slot.v)
            .for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
            });
    }

    pub fn tracked_params(&self) -> usize {
        self.state.len()
    }
}

fn azip(dst: &mut ArrayD<f64>, src: &ArrayD<f64>, f: impl Fn(&mut f64, f64)) {
    ndarray::Zip::from(dst).and(src).for_each(|d, &s| f(d, s));
}
