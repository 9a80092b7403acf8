//! DDPM noise schedule, forward noising and the reverse update.
//!
//! Steps are 1-based: `k = K` is pure noise and `k = 1` produces the sample.
//! The reverse update is
//!
//! ```text
//! A^{k-1} = α_k (A^k − γ_k ε̂ + σ_k z)
//! ```
//!
//! with `α_k = 1/√(1−β_k)`, `γ_k = β_k/√(1−ᾱ_k)` and `σ_k = √β̃_k`, where
//! `β̃_k = β_k (1−ᾱ_{k−1})/(1−ᾱ_k)` is the posterior variance (`σ_1 = 0`).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Linear β ramp over `steps` entries.
pub fn make_schedule(steps: usize, beta_lo: f64, beta_hi: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return invalid("diffusion steps must be > 0");
    }
    if !(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi < 1.0) {
        return invalid(format!("beta range must satisfy 0 < lo <= hi < 1 (got {beta_lo}, {beta_hi})"));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| if steps == 1 { beta_lo } else { beta_lo + (beta_hi - beta_lo) * i as f64 / (steps - 1) as f64 })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    let alpha = beta.iter().map(|b| 1.0 / (1.0 - b).sqrt()).collect();
    let gamma = beta.iter().zip(&alpha_bar).map(|(b, ab)| b / (1.0 - ab).sqrt()).collect();
    let sigma = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha_bar, alpha, gamma, sigma })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            return invalid(format!("diffusion step {k} outside [1, {}]", self.steps()));
        }
        Ok(k - 1)
    }

    /// `√ᾱ_k a0 + √(1−ᾱ_k) ε`.
    pub fn add_noise(&self, a0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let i = self.index(k)?;
        if a0.len() != eps.len() {
            return invalid(format!("noise has {} entries, sample has {}", eps.len(), a0.len()));
        }
        let (s, n) = (self.alpha_bar[i].sqrt(), (1.0 - self.alpha_bar[i]).sqrt());
        Ok(a0.iter().zip(eps).map(|(a, e)| s * a + n * e).collect())
    }

    /// One reverse step given the predicted noise and a standard normal draw
    /// `z` (ignored where σ_k = 0).
    pub fn denoise_update(&self, ak: &[f64], k: usize, eps_pred: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let i = self.index(k)?;
        if eps_pred.len() != ak.len() || z.len() != ak.len() {
            return invalid("denoise inputs differ in length");
        }
        let (a, g, s) = (self.alpha[i], self.gamma[i], self.sigma[i]);
        Ok(ak.iter().zip(eps_pred).zip(z).map(|((x, e), z)| a * (x - g * e + s * z)).collect())
    }
}
