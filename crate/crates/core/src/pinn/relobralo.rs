//! Relative loss balancing with random lookback.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfmError};

pub const N_LOSS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbConfig {
    pub alpha: f64,
    /// Probability that an iteration keeps its memory term (`rho = 1`).
    pub rho_expectation: f64,
    pub temperature: f64,
    pub eps: f64,
}

impl Default for RbConfig {
    fn default() -> Self {
        Self {
            alpha: 0.999,
            rho_expectation: 0.999,
            temperature: 1.0,
            eps: 1e-12,
        }
    }
}

impl RbConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.alpha)
            && (0.0..=1.0).contains(&self.rho_expectation)
            && self.temperature > 0.0
            && self.eps >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(VfmError::Config(format!("invalid loss-balancing settings {self:?}")))
        }
    }
}

/// `n_loss * softmax_j(L_j(now) / max(T * L_j(reference), eps))`
pub fn balanced_softmax(now: [f64; N_LOSS], reference: [f64; N_LOSS], cfg: &RbConfig) -> [f64; N_LOSS] {
    let x: [f64; N_LOSS] = std::array::from_fn(|j| now[j] / (cfg.temperature * reference[j]).max(cfg.eps));
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: [f64; N_LOSS] = std::array::from_fn(|j| (x[j] - m).exp());
    let s: f64 = e.iter().sum();
    std::array::from_fn(|j| (N_LOSS as f64 * e[j]) / s)
}

/// The weight recursion for a given lookback draw `rho` (0 or 1).
pub fn relobralo_update(
    mu_prev: [f64; N_LOSS],
    first: [f64; N_LOSS],
    prev: [f64; N_LOSS],
    now: [f64; N_LOSS],
    rho: f64,
    cfg: &RbConfig,
) -> [f64; N_LOSS] {
    let from_first = balanced_softmax(now, first, cfg);
    let from_prev = balanced_softmax(now, prev, cfg);
    std::array::from_fn(|j| {
        cfg.alpha * (rho * mu_prev[j] + (1.0 - rho) * from_first[j]) + (1.0 - cfg.alpha) * from_prev[j]
    })
}

#[derive(Clone, Debug)]
pub struct RbState {
    pub mu: [f64; N_LOSS],
    pub loss_first: Option<[f64; N_LOSS]>,
    pub loss_prev: Option<[f64; N_LOSS]>,
    pub cfg: RbConfig,
    pub iteration: usize,
    rng: ChaCha8Rng,
}

impl RbState {
    pub fn new(cfg: RbConfig, seed: u64) -> Self {
        Self {
            mu: [1.0; N_LOSS],
            loss_first: None,
            loss_prev: None,
            cfg,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Feed the losses of the next iteration. The first call records the
/// reference losses and keeps `mu = 1`; later calls apply the recursion
/// with a fresh Bernoulli lookback draw.
pub fn rb_step(state: &mut RbState, losses: [f64; N_LOSS]) -> Result<()> {
    if losses.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(VfmError::Optimization(format!("bad losses {losses:?}")));
    }
    state.iteration += 1;
    match (state.loss_first, state.loss_prev) {
        (Some(first), Some(prev)) => {
            let rho = if state.rng.gen::<f64>() < state.cfg.rho_expectation { 1.0 } else { 0.0 };
            state.mu = relobralo_update(state.mu, first, prev, losses, rho, &state.cfg);
        }
        _ => {
            state.mu = [1.0; N_LOSS];
            state.loss_first = Some(losses);
        }
    }
    state.loss_prev = Some(losses);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_losses_keep_unit_weights() {
        let mut s = RbState::new(RbConfig::default(), 7);
        for _ in 0..1000 {
            rb_step(&mut s, [0.3, 12.0, 4.5]).unwrap();
            assert_eq!(s.mu, [1.0; 3]);
        }
    }

    #[test]
    fn softmax_example() {
        let l = 10.0;
        let got = balanced_softmax([2.0 * l, l, l], [l; 3], &RbConfig::default());
        let e = [2f64.exp(), 1f64.exp(), 1f64.exp()];
        let s: f64 = e.iter().sum();
        for j in 0..3 {
            assert!((got[j] - 3.0 * e[j] / s).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_memory_keeps_previous_weights() {
        let cfg = RbConfig {
            alpha: 1.0,
            ..Default::default()
        };
        let mu = [0.7, 1.1, 1.2];
        let out = relobralo_update(mu, [1.0; 3], [2.0; 3], [3.0, 0.1, 5.0], 1.0, &cfg);
        assert_eq!(out, mu);
    }

    #[test]
    fn weights_stay_positive_and_sum_near_three() {
        let mut s = RbState::new(RbConfig::default(), 1);
        for k in 0..200 {
            let t = k as f64;
            rb_step(&mut s, [1.0 / (1.0 + t), (0.1 * t).sin().abs() + 1e-3, 2.0]).unwrap();
            assert!(s.mu.iter().all(|&m| m > 0.0));
        }
    }
}
