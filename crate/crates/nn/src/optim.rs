use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `param` in place. `t` is the 1-based step.
pub fn adam_step<T: Scalar>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], cfg: &AdamConfig, t: u64) {
    assert!(t >= 1, "adam step counter starts at 1");
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
        let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let update = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
        param[i] = T::of(param[i].as_f64() - update);
    }
}

/// Adam with per-parameter moment buffers keyed by name.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub cfg: AdamConfig,
    t: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.t += 1;
        for (name, p) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let n = p.numel();
            let (m, v) =
                self.moments.entry(name.to_string()).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            adam_step(p.data_mut(), g.data(), m, v, &self.cfg, self.t);
        }
    }
}
