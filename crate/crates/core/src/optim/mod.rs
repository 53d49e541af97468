//! AdamW, L-BFGS with a strong Wolfe line search, and the two-stage schedule
//! that chains them.

pub mod adamw;
pub mod dual_stage;
pub mod lbfgs;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use dual_stage::{adamw_only, dual_stage_optimize, DualStageConfig, DualStageResult, IterRecord, Stage, StagedProblem};
pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsState, LbfgsStepOutcome, Objective};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
