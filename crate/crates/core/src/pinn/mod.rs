//! Physics-informed network solvers: loss balancing by ReLoBRaLo (RB) and
//! the augmented-Lagrangian formulation (AL), both trained with the
//! two-stage AdamW then L-BFGS schedule.

pub mod augmented;
pub mod losses;
pub mod relobralo;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use augmented::{al_step, AlConfig, AlState};
pub use losses::{LossNodes, PinnContext, PinnForward, Weighting};
pub use relobralo::{balanced_softmax, rb_step, relobralo_update, RbConfig, RbState};

use crate::autodiff::{load_weights, save_weights, MlpParams, Normalization, LAYER_SIZES};
use crate::error::{Result, VfmError};
use crate::field::VelocityField;
use crate::grid::BoundaryConditionSet;
use crate::optim::{adamw_only, dual_stage_optimize, DualStageConfig, DualStageResult, IterRecord, StagedProblem};
use crate::phantom::DopplerFrame;
use crate::physics::{HuberConfig, LossBreakdown};

/// `10^-7.5`
pub const DEFAULT_MU4: f64 = 3.162_277_660_168_379e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// AdamW then L-BFGS.
    #[default]
    DualStage,
    /// AdamW for the whole budget.
    AdamWOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinnConfig {
    pub mu4: f64,
    pub huber: HuberConfig,
    pub dual_stage: DualStageConfig,
    pub schedule: Schedule,
    pub init_weights: Option<PathBuf>,
    /// Seeds the network initialization and the lookback draws.
    pub seed: u64,
    pub rb: RbConfig,
    pub al: AlConfig,
}

impl Default for PinnConfig {
    fn default() -> Self {
        Self {
            mu4: DEFAULT_MU4,
            huber: HuberConfig::default(),
            dual_stage: DualStageConfig::default(),
            schedule: Schedule::DualStage,
            init_weights: None,
            seed: 0,
            rb: RbConfig::default(),
            al: AlConfig::default(),
        }
    }
}

impl PinnConfig {
    pub fn with_iters(iters: usize) -> Self {
        Self {
            dual_stage: DualStageConfig::with_iters(iters),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu4 >= 0.0) {
            return Err(VfmError::Config(format!("mu4 must be non-negative, got {}", self.mu4)));
        }
        HuberConfig::new(self.huber.beta)?;
        self.rb.validate()?;
        self.dual_stage.validate()
    }

    /// Network to start from: the configured weight file, or a fresh
    /// initialization from `seed`.
    pub fn initial_params(&self) -> Result<MlpParams> {
        match &self.init_weights {
            Some(path) => Ok(load_weights(path, &LAYER_SIZES)?.0),
            None => Ok(MlpParams::init(self.seed)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PinnMethod {
    RbPinn,
    AlPinn,
}

impl PinnMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PinnMethod::RbPinn => "rb-pinn",
            PinnMethod::AlPinn => "al-pinn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorStats {
    pub len: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub max_abs: f64,
}

impl VectorStats {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len();
        Self {
            len: n,
            mean: if n == 0 { 0.0 } else { v.iter().sum::<f64>() / n as f64 },
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            max_abs: v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinnDiagnostics {
    pub method: PinnMethod,
    pub schedule: Schedule,
    pub stage1_iters: usize,
    pub stage2_steps: usize,
    pub evals: usize,
    pub loss_history: Vec<IterRecord>,
    pub final_losses: LossBreakdown,
    /// Frozen objective at the returned parameters.
    pub final_objective: f64,
    pub stage1_end_objective: Option<f64>,
    pub line_search_failures: usize,
    pub normalization: Normalization,
    pub rb_mu: Option<[f64; 3]>,
    pub al_mu: Option<f64>,
    pub lambda1: Option<VectorStats>,
    pub lambda2: Option<VectorStats>,
}

#[derive(Clone, Debug)]
pub struct PinnSolution {
    pub field: VelocityField,
    pub params: MlpParams,
    pub diagnostics: PinnDiagnostics,
}

/// Per-iteration view handed to an augmented-Lagrangian observer after the
/// multiplier update.
pub struct AlIteration<'a> {
    pub iter: usize,
    pub c1: &'a [f64],
    pub c2: &'a [f64],
    pub losses: LossBreakdown,
    pub state: &'a AlState,
}

struct RbProblem<'a> {
    ctx: &'a PinnContext,
    params: MlpParams,
    state: RbState,
    mu4: f64,
}

impl StagedProblem for RbProblem<'_> {
    fn stage1_eval(&mut self, x: &[f64], _iter: usize) -> Result<(f64, Vec<f64>)> {
        self.params.set_flat(x)?;
        let f = self.ctx.forward(&self.params)?;
        let l = f.losses;
        rb_step(&mut self.state, [l.l1, l.l2, l.l3])?;
        f.gradient(
            &self.params,
            &Weighting::Balanced {
                mu: self.state.mu,
                mu4: self.mu4,
            },
        )
    }

    fn frozen_eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.params.set_flat(x)?;
        let f = self.ctx.forward(&self.params)?;
        f.gradient(
            &self.params,
            &Weighting::Balanced {
                mu: self.state.mu,
                mu4: self.mu4,
            },
        )
    }
}

type AlObserver<'o> = &'o mut dyn FnMut(&AlIteration);

struct AlProblem<'a, 'o> {
    ctx: &'a PinnContext,
    params: MlpParams,
    state: AlState,
    mu4: f64,
    observer: Option<AlObserver<'o>>,
}

impl AlProblem<'_, '_> {
    fn weighting(&self) -> Weighting<'_> {
        Weighting::Augmented {
            lambda1: &self.state.lambda1,
            lambda2: &self.state.lambda2,
            mu: self.state.mu,
            mu4: self.mu4,
        }
    }
}

impl StagedProblem for AlProblem<'_, '_> {
    fn stage1_eval(&mut self, x: &[f64], iter: usize) -> Result<(f64, Vec<f64>)> {
        self.params.set_flat(x)?;
        let f = self.ctx.forward(&self.params)?;
        let out = f.gradient(&self.params, &self.weighting())?;
        let (c1, c2) = (f.c1(), f.c2());
        al_step(&mut self.state, &c1, &c2, f.losses.l2, f.losses.l3)?;
        if let Some(obs) = self.observer.as_mut() {
            obs(&AlIteration {
                iter,
                c1: &c1,
                c2: &c2,
                losses: f.losses,
                state: &self.state,
            });
        }
        Ok(out)
    }

    fn frozen_eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.params.set_flat(x)?;
        let f = self.ctx.forward(&self.params)?;
        f.gradient(&self.params, &self.weighting())
    }
}

fn optimize<P: StagedProblem>(problem: &mut P, x0: &[f64], cfg: &PinnConfig) -> Result<DualStageResult> {
    match cfg.schedule {
        Schedule::DualStage => dual_stage_optimize(problem, x0, &cfg.dual_stage),
        Schedule::AdamWOnly => adamw_only(problem, x0, cfg.dual_stage.total_iters, &cfg.dual_stage.adamw),
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    ctx: &PinnContext,
    method: PinnMethod,
    cfg: &PinnConfig,
    mut params: MlpParams,
    run: DualStageResult,
    rb_mu: Option<[f64; 3]>,
    al: Option<&AlState>,
) -> Result<PinnSolution> {
    params.set_flat(&run.params)?;
    let f = ctx.forward(&params)?;
    let field = ctx.field_from_outputs(f.outputs().expect("network evaluation"))?;
    Ok(PinnSolution {
        field,
        diagnostics: PinnDiagnostics {
            method,
            schedule: cfg.schedule,
            stage1_iters: run.stage1_iters,
            stage2_steps: run.stage2_steps,
            evals: run.evals,
            loss_history: run.history,
            final_losses: f.losses,
            final_objective: run.final_loss,
            stage1_end_objective: run.stage1_end_loss,
            line_search_failures: run.line_search_failures,
            normalization: ctx.normalization(),
            rb_mu,
            al_mu: al.map(|s| s.mu),
            lambda1: al.map(|s| VectorStats::of(&s.lambda1)),
            lambda2: al.map(|s| VectorStats::of(&s.lambda2)),
        },
        params,
    })
}

/// RB-PINN from explicit starting parameters.
pub fn rb_pinn_solve_from(
    frame: &DopplerFrame,
    bc: &BoundaryConditionSet,
    cfg: &PinnConfig,
    init: MlpParams,
) -> Result<PinnSolution> {
    cfg.validate()?;
    let ctx = PinnContext::new(frame, bc, cfg.huber)?;
    let x0 = init.to_flat();
    let mut problem = RbProblem {
        ctx: &ctx,
        params: init,
        state: RbState::new(cfg.rb, cfg.seed),
        mu4: cfg.mu4,
    };
    let run = optimize(&mut problem, &x0, cfg)?;
    let mu = problem.state.mu;
    finish(&ctx, PinnMethod::RbPinn, cfg, problem.params, run, Some(mu), None)
}

pub fn rb_pinn_solve(frame: &DopplerFrame, bc: &BoundaryConditionSet, cfg: &PinnConfig) -> Result<PinnSolution> {
    rb_pinn_solve_from(frame, bc, cfg, cfg.initial_params()?)
}

/// AL-PINN from explicit starting parameters, calling `observer` after
/// every first-stage multiplier update.
pub fn al_pinn_solve_observed(
    frame: &DopplerFrame,
    bc: &BoundaryConditionSet,
    cfg: &PinnConfig,
    init: MlpParams,
    observer: Option<AlObserver<'_>>,
) -> Result<PinnSolution> {
    cfg.validate()?;
    let ctx = PinnContext::new(frame, bc, cfg.huber)?;
    let x0 = init.to_flat();
    let mut problem = AlProblem {
        state: AlState::new(ctx.n_cells(), ctx.n_boundary(), &cfg.al)?,
        ctx: &ctx,
        params: init,
        mu4: cfg.mu4,
        observer,
    };
    let run = optimize(&mut problem, &x0, cfg)?;
    let AlProblem { params, state, .. } = problem;
    finish(&ctx, PinnMethod::AlPinn, cfg, params, run, None, Some(&state))
}

pub fn al_pinn_solve(frame: &DopplerFrame, bc: &BoundaryConditionSet, cfg: &PinnConfig) -> Result<PinnSolution> {
    al_pinn_solve_observed(frame, bc, cfg, cfg.initial_params()?, None)
}

pub fn pinn_solve_from(
    method: PinnMethod,
    frame: &DopplerFrame,
    bc: &BoundaryConditionSet,
    cfg: &PinnConfig,
    init: MlpParams,
) -> Result<PinnSolution> {
    match method {
        PinnMethod::RbPinn => rb_pinn_solve_from(frame, bc, cfg, init),
        PinnMethod::AlPinn => al_pinn_solve_observed(frame, bc, cfg, init, None),
    }
}

/// Fit a reference frame with RB-PINN from a fresh initialization and save
/// the result as warm-start weights.
pub fn pretrain_reference(
    frame: &DopplerFrame,
    bc: &BoundaryConditionSet,
    cfg: &PinnConfig,
    path: &Path,
) -> Result<PinnSolution> {
    let cfg = PinnConfig {
        init_weights: None,
        ..cfg.clone()
    };
    let sol = rb_pinn_solve(frame, bc, &cfg)?;
    save_weights(&sol.params, Some(sol.diagnostics.normalization), path)?;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{extract_boundary, sector_segmentation, PolarGrid};
    use crate::phantom::{stream_function_field, synthesize_doppler, StreamFunctionSpec};

    fn phantom() -> (DopplerFrame, BoundaryConditionSet) {
        let grid = PolarGrid::sector(8, 12).unwrap();
        let seg = sector_segmentation(&grid, 1).unwrap();
        let truth = stream_function_field(&StreamFunctionSpec::single_vortex(0.01), &grid, &seg).unwrap();
        let frame = synthesize_doppler(&truth, &grid, &seg, 30.0, 4).unwrap();
        let bc = extract_boundary(&seg, &grid, None).unwrap();
        (frame, bc)
    }

    #[test]
    fn rb_objective_is_weighted_sum_of_breakdown() {
        let (frame, bc) = phantom();
        let cfg = PinnConfig::with_iters(12);
        let sol = rb_pinn_solve(&frame, &bc, &cfg).unwrap();
        let d = &sol.diagnostics;
        let mu = d.rb_mu.unwrap();
        let l = d.final_losses;
        let recomputed = mu[0] * l.l1 + mu[1] * l.l2 + mu[2] * l.l3 + cfg.mu4 * l.l4;
        assert!((d.final_objective - recomputed).abs() <= 1e-12 * recomputed.abs());
        assert!(mu.iter().all(|&m| m > 0.0));
        assert_eq!((d.stage1_iters, d.stage2_steps), (10, 2));
    }

    #[test]
    fn solves_are_deterministic() {
        let (frame, bc) = phantom();
        let cfg = PinnConfig::with_iters(10);
        for method in [PinnMethod::RbPinn, PinnMethod::AlPinn] {
            let a = pinn_solve_from(method, &frame, &bc, &cfg, cfg.initial_params().unwrap()).unwrap();
            let b = pinn_solve_from(method, &frame, &bc, &cfg, cfg.initial_params().unwrap()).unwrap();
            assert_eq!(a.field, b.field);
            assert_eq!(a.diagnostics, b.diagnostics);
        }
    }

    #[test]
    fn al_multipliers_accumulate_residuals() {
        let (frame, bc) = phantom();
        let cfg = PinnConfig::with_iters(20);
        let mut sum_c1: Vec<f64> = Vec::new();
        let mut mus = Vec::new();
        let mut mirror: Vec<f64> = Vec::new();
        let mut obs = |it: &AlIteration| {
            if sum_c1.is_empty() {
                sum_c1 = vec![0.0; it.c1.len()];
                mirror = vec![0.0; it.c1.len()];
            }
            for k in 0..it.c1.len() {
                sum_c1[k] += it.c1[k];
                mirror[k] += cfg.al.eta_lambda * it.c1[k];
            }
            mus.push(it.state.mu);
            assert_eq!(it.state.lambda1, mirror);
        };
        let sol = al_pinn_solve_observed(&frame, &bc, &cfg, cfg.initial_params().unwrap(), Some(&mut obs)).unwrap();
        assert_eq!(mus.len(), 18);
        assert!(mus.windows(2).all(|w| w[1] >= w[0]) && mus[0] >= 2.0);
        assert!(sol.diagnostics.al_mu.unwrap() >= 2.0);
    }

    #[test]
    fn config_rejects_negative_smoothing_weight() {
        let cfg = PinnConfig {
            mu4: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
