//! Multiplier and penalty updates of the augmented-Lagrangian objective.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VfmError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlConfig {
    pub mu0: f64,
    pub eta_lambda: f64,
    pub eta_mu: f64,
}

impl Default for AlConfig {
    fn default() -> Self {
        Self {
            mu0: 2.0,
            eta_lambda: 1e-5,
            eta_mu: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlState {
    /// One multiplier per cavity cell.
    pub lambda1: Vec<f64>,
    /// One multiplier per boundary sample.
    pub lambda2: Vec<f64>,
    pub mu: f64,
    pub eta_lambda: f64,
    pub eta_mu: f64,
}

impl AlState {
    pub fn new(n_cells: usize, n_boundary: usize, cfg: &AlConfig) -> Result<Self> {
        if !(cfg.mu0 > 0.0) || cfg.eta_lambda < 0.0 || cfg.eta_mu < 0.0 {
            return Err(VfmError::Config(format!("invalid augmented-Lagrangian settings {cfg:?}")));
        }
        Ok(Self {
            lambda1: vec![0.0; n_cells],
            lambda2: vec![0.0; n_boundary],
            mu: cfg.mu0,
            eta_lambda: cfg.eta_lambda,
            eta_mu: cfg.eta_mu,
        })
    }
}

/// Gradient ascent on the multipliers (`d/d lambda <lambda, C> = C`) and on
/// the penalty coefficient (`d/d mu = 0.5 (L2 + L3)`).
pub fn al_step(state: &mut AlState, c1: &[f64], c2: &[f64], l2: f64, l3: f64) -> Result<()> {
    if c1.len() != state.lambda1.len() || c2.len() != state.lambda2.len() {
        return Err(VfmError::ShapeMismatch(format!(
            "residuals ({}, {}) vs multipliers ({}, {})",
            c1.len(),
            c2.len(),
            state.lambda1.len(),
            state.lambda2.len()
        )));
    }
    for (l, c) in state.lambda1.iter_mut().zip(c1) {
        *l += state.eta_lambda * c;
    }
    for (l, c) in state.lambda2.iter_mut().zip(c2) {
        *l += state.eta_lambda * c;
    }
    state.mu += state.eta_mu * 0.5 * (l2 + l3);
    Ok(())
}
