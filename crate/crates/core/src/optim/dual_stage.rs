//! AdamW for the leading fraction of the iteration budget, then L-BFGS on a
//! frozen objective for the rest.

use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamWConfig, AdamWState};
use super::lbfgs::{lbfgs_step, LbfgsConfig, LbfgsState};
use crate::error::{Result, VfmError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualStageConfig {
    pub total_iters: usize,
    pub stage_split: f64,
    pub adamw: AdamWConfig,
    pub lbfgs: LbfgsConfig,
}

impl Default for DualStageConfig {
    fn default() -> Self {
        Self {
            total_iters: 2500,
            stage_split: 0.9,
            adamw: AdamWConfig::default(),
            lbfgs: LbfgsConfig::default(),
        }
    }
}

impl DualStageConfig {
    pub fn with_iters(total_iters: usize) -> Self {
        Self {
            total_iters,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stage_split > 0.0 && self.stage_split < 1.0) {
            return Err(VfmError::Config(format!(
                "stage split must lie strictly between 0 and 1, got {}",
                self.stage_split
            )));
        }
        if self.total_iters < 2 {
            return Err(VfmError::Config("at least two iterations are needed".into()));
        }
        self.adamw.validate()?;
        self.lbfgs.validate()
    }

    /// `floor(split * I)`
    pub fn stage1_iters(&self) -> usize {
        ((self.stage_split * self.total_iters as f64) + 1e-9).floor() as usize
    }

    pub fn stage2_steps(&self) -> usize {
        self.total_iters - self.stage1_iters()
    }
}

/// An objective whose loss weights may adapt while the first stage runs.
pub trait StagedProblem {
    /// First-stage iteration `iter` (1-based): evaluate at `x`, update any
    /// adaptive weights, and return the loss and gradient that drive this
    /// iteration's parameter update.
    fn stage1_eval(&mut self, x: &[f64], iter: usize) -> Result<(f64, Vec<f64>)>;

    /// Objective with all weights held at their current values.
    fn frozen_eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AdamW,
    Lbfgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub stage: Stage,
    pub loss: f64,
    /// Objective evaluations so far.
    pub evals: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualStageResult {
    pub params: Vec<f64>,
    pub history: Vec<IterRecord>,
    pub stage1_iters: usize,
    pub stage2_steps: usize,
    pub evals: usize,
    /// Frozen objective at the parameters handed from AdamW to L-BFGS.
    pub stage1_end_loss: Option<f64>,
    /// Frozen objective at the returned parameters.
    pub final_loss: f64,
    pub line_search_failures: usize,
}

fn run_adamw<P: StagedProblem + ?Sized>(
    problem: &mut P,
    x: &mut [f64],
    iters: usize,
    cfg: &AdamWConfig,
    history: &mut Vec<IterRecord>,
    evals: &mut usize,
) -> Result<()> {
    let mut state = AdamWState::new(x.len());
    for i in 1..=iters {
        let (loss, grad) = problem.stage1_eval(x, i)?;
        *evals += 1;
        if !loss.is_finite() {
            return Err(VfmError::Optimization(format!("non-finite loss at iteration {i}")));
        }
        adamw_step(&mut state, x, &grad, cfg)?;
        history.push(IterRecord {
            iter: i,
            stage: Stage::AdamW,
            loss,
            evals: *evals,
        });
    }
    Ok(())
}

pub fn dual_stage_optimize<P: StagedProblem + ?Sized>(
    problem: &mut P,
    x0: &[f64],
    cfg: &DualStageConfig,
) -> Result<DualStageResult> {
    cfg.validate()?;
    let n1 = cfg.stage1_iters();
    let n2 = cfg.stage2_steps();
    let mut x = x0.to_vec();
    let mut history = Vec::with_capacity(cfg.total_iters);
    let mut evals = 0;
    run_adamw(problem, &mut x, n1, &cfg.adamw, &mut history, &mut evals)?;

    let mut state = LbfgsState::new();
    let mut stage1_end_loss = None;
    let mut final_loss = f64::NAN;
    let mut failures = 0;
    for k in 1..=n2 {
        let mut obj = |p: &[f64]| problem.frozen_eval(p);
        let out = lbfgs_step(&mut state, &mut obj, &mut x, &cfg.lbfgs)?;
        evals += out.evals;
        if k == 1 {
            stage1_end_loss = Some(out.loss_start);
        }
        if out.line_search_failed {
            failures += 1;
        }
        final_loss = out.loss_end;
        history.push(IterRecord {
            iter: n1 + k,
            stage: Stage::Lbfgs,
            loss: out.loss_end,
            evals,
        });
    }
    Ok(DualStageResult {
        params: x,
        history,
        stage1_iters: n1,
        stage2_steps: n2,
        evals,
        stage1_end_loss,
        final_loss,
        line_search_failures: failures,
    })
}

/// Single-stage baseline: `iters` AdamW iterations with adaptive weights
/// active throughout. The final loss is the frozen objective at the end.
pub fn adamw_only<P: StagedProblem + ?Sized>(
    problem: &mut P,
    x0: &[f64],
    iters: usize,
    cfg: &AdamWConfig,
) -> Result<DualStageResult> {
    cfg.validate()?;
    let mut x = x0.to_vec();
    let mut history = Vec::with_capacity(iters);
    let mut evals = 0;
    run_adamw(problem, &mut x, iters, cfg, &mut history, &mut evals)?;
    let (final_loss, _) = problem.frozen_eval(&x)?;
    evals += 1;
    Ok(DualStageResult {
        params: x,
        history,
        stage1_iters: iters,
        stage2_steps: 0,
        evals,
        stage1_end_loss: Some(final_loss),
        final_loss,
        line_search_failures: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        scales: Vec<f64>,
    }

    impl Quadratic {
        fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
            let f = x.iter().zip(&self.scales).map(|(v, s)| 0.5 * s * (v - 1.0).powi(2)).sum();
            let g = x.iter().zip(&self.scales).map(|(v, s)| s * (v - 1.0)).collect();
            (f, g)
        }
    }

    impl StagedProblem for Quadratic {
        fn stage1_eval(&mut self, x: &[f64], _iter: usize) -> Result<(f64, Vec<f64>)> {
            Ok(self.eval(x))
        }
        fn frozen_eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok(self.eval(x))
        }
    }

    #[test]
    fn paper_budget_splits_2250_250() {
        let cfg = DualStageConfig::default();
        assert_eq!((cfg.stage1_iters(), cfg.stage2_steps()), (2250, 250));
        let cfg = DualStageConfig::with_iters(10);
        assert_eq!((cfg.stage1_iters(), cfg.stage2_steps()), (9, 1));
    }

    #[test]
    fn invalid_split_rejected() {
        let mut cfg = DualStageConfig::with_iters(10);
        cfg.stage_split = 1.0;
        assert!(cfg.validate().is_err());
        cfg.stage_split = 0.0;
        assert!(cfg.validate().is_err());
        assert!(DualStageConfig::with_iters(1).validate().is_err());
    }

    #[test]
    fn dual_stage_beats_adamw_only_on_quadratic() {
        let mut cfg = DualStageConfig::with_iters(10);
        cfg.adamw.lr = 1e-2;
        let mut p = Quadratic {
            scales: vec![1.0, 4.0, 0.5, 2.0],
        };
        let x0 = vec![0.0; 4];
        let dual = dual_stage_optimize(&mut p, &x0, &cfg).unwrap();
        let single = adamw_only(&mut p, &x0, 10, &cfg.adamw).unwrap();
        assert!(dual.final_loss <= single.final_loss);
        assert!(dual.final_loss <= dual.stage1_end_loss.unwrap());
        assert_eq!(dual.history.len(), 10);
        assert_eq!(dual.history[8].stage, Stage::AdamW);
        assert_eq!(dual.history[9].stage, Stage::Lbfgs);
    }
}
