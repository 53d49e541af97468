//! Limited-memory BFGS with a strong Wolfe line search.
//!
//! The iteration mirrors the common deep-learning formulation: a step runs
//! up to `max_iter_per_step` quasi-Newton iterations, and curvature history
//! persists across steps through [`LbfgsState`].

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::dot;
use crate::error::{Result, VfmError};

/// Something that returns a loss and its gradient at a point.
pub trait Objective {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub max_iter_per_step: usize,
    /// Objective evaluations allowed per step, line search included.
    pub max_eval_per_step: usize,
    pub history_size: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub tol_grad: f64,
    pub tol_change: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_iter_per_step: 10,
            max_eval_per_step: 12,
            history_size: 10,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            tol_grad: 1e-9,
            tol_change: 1e-11,
            max_line_search: 25,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iter_per_step >= 1
            && self.max_eval_per_step >= 1
            && self.history_size >= 1
            && 0.0 < self.wolfe_c1
            && self.wolfe_c1 < self.wolfe_c2
            && self.wolfe_c2 < 1.0
            && self.tol_grad >= 0.0
            && self.tol_change >= 0.0
            && self.max_line_search >= 1;
        if ok {
            Ok(())
        } else {
            Err(VfmError::Config(format!("invalid L-BFGS settings {self:?}")))
        }
    }
}

/// Curvature pairs and the last direction, kept between steps.
#[derive(Clone, Debug, Default)]
pub struct LbfgsState {
    dirs: VecDeque<Vec<f64>>,
    steps: VecDeque<Vec<f64>>,
    rho: VecDeque<f64>,
    h_diag: f64,
    d: Vec<f64>,
    t: f64,
    prev_grad: Vec<f64>,
    n_iter: usize,
    pub func_evals: usize,
}

impl LbfgsState {
    pub fn new() -> Self {
        Self {
            h_diag: 1.0,
            ..Default::default()
        }
    }

    /// Drop all curvature information; the next iteration is steepest descent.
    pub fn reset(&mut self) {
        let evals = self.func_evals;
        *self = Self::new();
        self.func_evals = evals;
    }

    pub fn history_len(&self) -> usize {
        self.dirs.len()
    }
}

/// Line-search bookkeeping of one accepted iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcceptedStep {
    pub t: f64,
    pub f0: f64,
    pub gtd0: f64,
    pub f_new: f64,
    pub gtd_new: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsStepOutcome {
    pub loss_start: f64,
    pub loss_end: f64,
    pub iterations: usize,
    pub evals: usize,
    pub accepted: Vec<AcceptedStep>,
    pub line_search_failed: bool,
}

fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, bounds: Option<(f64, f64)>) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let min_pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if min_pos.is_nan() {
            return 0.5 * (lo + hi);
        }
        min_pos.max(lo).min(hi)
    } else {
        0.5 * (lo + hi)
    }
}

struct Probe {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

struct LineSearch<'a> {
    x: &'a [f64],
    d: &'a [f64],
    evals: usize,
    trial: Vec<f64>,
}

impl LineSearch<'_> {
    fn probe(&mut self, obj: &mut dyn Objective, t: f64) -> Result<Probe> {
        for ((xt, &x), &d) in self.trial.iter_mut().zip(self.x).zip(self.d) {
            *xt = x + t * d;
        }
        let (f, g) = obj.eval(&self.trial)?;
        self.evals += 1;
        let gtd = dot(&g, self.d);
        Ok(Probe { t, f, g, gtd })
    }
}

/// Strong Wolfe search along `d` from `x` (loss `f`, slope `gtd` < 0):
/// bracketing phase followed by cubic-interpolation zoom. Returns the best
/// probe and whether it satisfies both Wolfe conditions.
fn strong_wolfe(
    obj: &mut dyn Objective,
    x: &[f64],
    d: &[f64],
    t0: f64,
    f: f64,
    g: &[f64],
    gtd: f64,
    cfg: &LbfgsConfig,
) -> Result<(Probe, usize)> {
    let (c1, c2) = (cfg.wolfe_c1, cfg.wolfe_c2);
    let d_norm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut ls = LineSearch {
        x,
        d,
        evals: 0,
        trial: vec![0.0; x.len()],
    };
    let mut new = ls.probe(obj, t0)?;
    let mut prev = Probe {
        t: 0.0,
        f,
        g: g.to_vec(),
        gtd,
    };
    let mut ls_iter = 0;
    let mut bracket: [Probe; 2];
    loop {
        if !new.f.is_finite() || new.f > f + c1 * new.t * gtd || (ls_iter > 1 && new.f >= prev.f) {
            bracket = [prev, new];
            break;
        }
        if new.gtd.abs() <= -c2 * gtd {
            return Ok((new, ls.evals));
        }
        if new.gtd >= 0.0 {
            bracket = [prev, new];
            break;
        }
        if ls_iter + 1 >= cfg.max_line_search {
            let start = Probe {
                t: 0.0,
                f,
                g: g.to_vec(),
                gtd,
            };
            bracket = [start, new];
            break;
        }
        let min_step = new.t + 0.01 * (new.t - prev.t);
        let max_step = new.t * 10.0;
        let t = cubic_interpolate(prev.t, prev.f, prev.gtd, new.t, new.f, new.gtd, Some((min_step, max_step)));
        prev = new;
        new = ls.probe(obj, t)?;
        ls_iter += 1;
    }

    let mut low = if bracket[0].f <= bracket[1].f { 0 } else { 1 };
    let mut insuf_progress = false;
    while ls_iter < cfg.max_line_search {
        let (a, b) = (bracket[0].t, bracket[1].t);
        if (b - a).abs() * d_norm < cfg.tol_change {
            break;
        }
        let mut t = cubic_interpolate(a, bracket[0].f, bracket[0].gtd, b, bracket[1].f, bracket[1].gtd, None);
        let (bmin, bmax) = (a.min(b), a.max(b));
        let eps = 0.1 * (bmax - bmin);
        if (bmax - t).min(t - bmin) < eps {
            if insuf_progress || t >= bmax || t <= bmin {
                t = if (t - bmax).abs() < (t - bmin).abs() { bmax - eps } else { bmin + eps };
                insuf_progress = false;
            } else {
                insuf_progress = true;
            }
        } else {
            insuf_progress = false;
        }
        let p = ls.probe(obj, t)?;
        ls_iter += 1;
        let high = 1 - low;
        if !p.f.is_finite() || p.f > f + c1 * t * gtd || p.f >= bracket[low].f {
            bracket[high] = p;
            low = if bracket[0].f <= bracket[1].f { 0 } else { 1 };
        } else {
            if p.gtd.abs() <= -c2 * gtd {
                return Ok((p, ls.evals));
            }
            if p.gtd * (bracket[high].t - bracket[low].t) >= 0.0 {
                let old_low = std::mem::replace(&mut bracket[low], p);
                bracket[high] = old_low;
            } else {
                bracket[low] = p;
            }
        }
    }
    let [b0, b1] = bracket;
    Ok((if low == 0 { b0 } else { b1 }, ls.evals))
}

fn satisfies_wolfe(p: &Probe, f: f64, gtd: f64, cfg: &LbfgsConfig) -> bool {
    p.t > 0.0 && p.f.is_finite() && p.f <= f + cfg.wolfe_c1 * p.t * gtd && p.gtd.abs() <= -cfg.wolfe_c2 * gtd
}

/// One optimizer step: up to `max_iter_per_step` iterations on `x`, with
/// curvature history carried in `state`. An iteration whose line search
/// ends without a strong Wolfe point leaves `x` where the step found it and
/// clears the history.
pub fn lbfgs_step(
    state: &mut LbfgsState,
    obj: &mut dyn Objective,
    x: &mut [f64],
    cfg: &LbfgsConfig,
) -> Result<LbfgsStepOutcome> {
    let (mut loss, mut g) = obj.eval(x)?;
    let mut evals = 1;
    state.func_evals += 1;
    if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(VfmError::Optimization("non-finite loss or gradient at L-BFGS entry".into()));
    }
    let mut out = LbfgsStepOutcome {
        loss_start: loss,
        loss_end: loss,
        iterations: 0,
        evals: 1,
        accepted: Vec::new(),
        line_search_failed: false,
    };
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    if max_abs(&g) <= cfg.tol_grad {
        return Ok(out);
    }
    let mut n_iter = 0;
    while n_iter < cfg.max_iter_per_step {
        n_iter += 1;
        state.n_iter += 1;
        if state.n_iter == 1 {
            state.d = g.iter().map(|v| -v).collect();
            state.dirs.clear();
            state.steps.clear();
            state.rho.clear();
            state.h_diag = 1.0;
        } else {
            let y: Vec<f64> = g.iter().zip(&state.prev_grad).map(|(a, b)| a - b).collect();
            let s: Vec<f64> = state.d.iter().map(|v| v * state.t).collect();
            let ys = dot(&y, &s);
            if ys > 1e-10 {
                if state.dirs.len() == cfg.history_size {
                    state.dirs.pop_front();
                    state.steps.pop_front();
                    state.rho.pop_front();
                }
                state.h_diag = ys / dot(&y, &y);
                state.dirs.push_back(y);
                state.steps.push_back(s);
                state.rho.push_back(1.0 / ys);
            }
            let k = state.dirs.len();
            let mut al = vec![0.0; k];
            let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
            for i in (0..k).rev() {
                al[i] = dot(&state.steps[i], &q) * state.rho[i];
                for (qj, yj) in q.iter_mut().zip(&state.dirs[i]) {
                    *qj -= al[i] * yj;
                }
            }
            let mut r: Vec<f64> = q.iter().map(|v| v * state.h_diag).collect();
            for i in 0..k {
                let be = dot(&state.dirs[i], &r) * state.rho[i];
                for (rj, sj) in r.iter_mut().zip(&state.steps[i]) {
                    *rj += sj * (al[i] - be);
                }
            }
            state.d = r;
        }
        state.prev_grad = g.clone();
        let prev_loss = loss;
        let t0 = if state.n_iter == 1 {
            (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0)
        } else {
            1.0
        };
        let gtd = dot(&g, &state.d);
        if gtd > -cfg.tol_change {
            break;
        }
        let x_init = x.to_vec();
        let d = state.d.clone();
        let (probe, ls_evals) = strong_wolfe(obj, &x_init, &d, t0, loss, &g, gtd, cfg)?;
        evals += ls_evals;
        state.func_evals += ls_evals;
        out.iterations = n_iter;
        if !satisfies_wolfe(&probe, loss, gtd, cfg) {
            out.line_search_failed = true;
            state.reset();
            break;
        }
        for ((xi, &x0), &di) in x.iter_mut().zip(&x_init).zip(&d) {
            *xi = x0 + probe.t * di;
        }
        out.accepted.push(AcceptedStep {
            t: probe.t,
            f0: loss,
            gtd0: gtd,
            f_new: probe.f,
            gtd_new: probe.gtd,
        });
        state.t = probe.t;
        loss = probe.f;
        g = probe.g;
        let opt_cond = max_abs(&g) <= cfg.tol_grad;
        if n_iter == cfg.max_iter_per_step || evals >= cfg.max_eval_per_step || opt_cond {
            break;
        }
        if max_abs(&d) * probe.t <= cfg.tol_change || (loss - prev_loss).abs() < cfg.tol_change {
            break;
        }
    }
    out.loss_end = loss;
    out.evals = evals;
    Ok(out)
}

/// Run a single L-BFGS step from `x0` with fresh state.
pub fn lbfgs_minimize(obj: &mut dyn Objective, x0: &[f64], cfg: &LbfgsConfig) -> Result<(Vec<f64>, LbfgsStepOutcome)> {
    cfg.validate()?;
    let mut x = x0.to_vec();
    let mut state = LbfgsState::new();
    let out = lbfgs_step(&mut state, obj, &mut x, cfg)?;
    Ok((x, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(a: Vec<Vec<f64>>, b: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let ax: Vec<f64> = a.iter().map(|row| dot(row, x)).collect();
            let f = 0.5 * dot(x, &ax) - dot(&b, x);
            let g = ax.iter().zip(&b).map(|(p, q)| p - q).collect();
            Ok((f, g))
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn cubic_interpolation_finds_quadratic_minimum() {
        // f = (t - 2)^2 sampled at 0 and 3
        let t = cubic_interpolate(0.0, 4.0, -4.0, 3.0, 1.0, 2.0, None);
        assert!((t - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_returns_input() {
        let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((x.iter().map(|v| v * v).sum(), vec![0.0; x.len()])) };
        let (x, out) = lbfgs_minimize(&mut f, &[0.0, 0.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn non_finite_entry_is_an_error() {
        let mut f = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(lbfgs_minimize(&mut f, &[1.0], &LbfgsConfig::default()).is_err());
    }

    #[test]
    fn rosenbrock_decreases_on_every_accepted_iteration() {
        let cfg = LbfgsConfig {
            max_iter_per_step: 100,
            max_eval_per_step: 500,
            ..Default::default()
        };
        let (x, out) = lbfgs_minimize(&mut rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!(!out.accepted.is_empty());
        for s in &out.accepted {
            assert!(s.f_new < s.f0);
            assert!(s.f_new <= s.f0 + cfg.wolfe_c1 * s.t * s.gtd0);
            assert!(s.gtd_new.abs() <= cfg.wolfe_c2 * s.gtd0.abs());
        }
        assert!((x[0] - 1.0).abs() < 1e-4 && (x[1] - 1.0).abs() < 1e-4, "{x:?}");
    }

    #[test]
    fn convex_quadratic_solved_to_closed_form_minimum() {
        let n = 5;
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 2.0 + i as f64 } else { 0.3 / (1.0 + (i + j) as f64) }).collect())
            .collect();
        let x_star = [1.0, -2.0, 0.5, 3.0, -1.0];
        let b: Vec<f64> = a.iter().map(|row| dot(row, &x_star)).collect();
        let cfg = LbfgsConfig {
            max_iter_per_step: 4 * n,
            max_eval_per_step: 1000,
            tol_change: 0.0,
            ..Default::default()
        };
        let (x, out) = lbfgs_minimize(&mut quadratic(a, b), &[0.0; 5], &cfg).unwrap();
        assert!(out.iterations <= 4 * n);
        let err = x.iter().zip(&x_star).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-8, "error {err} after {} iterations", out.iterations);
    }
}
