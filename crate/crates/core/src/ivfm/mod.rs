//! One-shot reconstruction as an equality-constrained weighted least-squares
//! problem.
//!
//! Unknowns are `x = [v_r; v_theta]` over the cavity cells in [`CellIndex`]
//! order. The objective is `sum w (v_r - v_D)^2 + lambda_s x' Q x` with `Q`
//! the smoothing quadratic form; the constraints are discrete mass
//! conservation at cells with a full central stencil and the free-slip
//! condition at every wall sample. First-order optimality gives
//!
//! ```text
//! [ H  A' ] [x ]   [f]
//! [ A  0  ] [nu] = [b]      H = W + lambda_s Q + delta I,  f = W v_D
//! ```

pub mod banded;
pub mod lsqr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VfmError};
use crate::field::VelocityField;
use crate::grid::{BoundaryConditionSet, CellIndex};
use crate::metrics::{median, nrmse};
use crate::parallel::{map_items, ExecPolicy};
use crate::phantom::DopplerFrame;
use crate::physics::smoothing_operator;
use crate::pinn::VectorStats;
use crate::sparse::{CsrBuilder, CsrMatrix};

use banded::BandMatrix;

pub const DEFAULT_LAMBDA_S: f64 = 1e-6;
/// `delta = DELTA_REL * trace(H) / 2N`
pub const DELTA_REL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct KktSystem {
    /// `W + lambda_s Q + delta I`, both triangles stored.
    pub h: CsrMatrix,
    /// Mass-conservation rows first, then wall rows.
    pub a: CsrMatrix,
    pub rhs_primal: Vec<f64>,
    pub rhs_constraint: Vec<f64>,
    pub index: CellIndex,
    pub n_data: usize,
    pub n_c1: usize,
    pub n_c2: usize,
    pub delta: f64,
    /// Dual regularization used only inside the factorization.
    pub dual_delta: f64,
    /// Cell owning each constraint row.
    row_cell: Vec<usize>,
}

impl KktSystem {
    pub fn n_cells(&self) -> usize {
        self.index.len()
    }

    pub fn n_unknowns(&self) -> usize {
        2 * self.index.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.a.rows()
    }

    /// `||A x - b||_inf`
    pub fn constraint_residual(&self, x: &[f64]) -> f64 {
        self.a
            .matvec(x)
            .iter()
            .zip(&self.rhs_constraint)
            .fold(0.0f64, |m, (ax, b)| m.max((ax - b).abs()))
    }

    /// `0.5 x' H x - f' x`, the objective minimized by the KKT solution.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let hx = self.h.matvec(x);
        0.5 * x.iter().zip(&hx).map(|(a, b)| a * b).sum::<f64>()
            - x.iter().zip(&self.rhs_primal).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Product with the full saddle matrix.
    pub fn kkt_matvec(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n_unknowns();
        let (x, nu) = z.split_at(n);
        let mut top = self.h.matvec(x);
        self.a.transpose_matvec_acc(nu, &mut top);
        top.extend(self.a.matvec(x));
        top
    }

    pub fn rhs(&self) -> Vec<f64> {
        let mut r = self.rhs_primal.clone();
        r.extend_from_slice(&self.rhs_constraint);
        r
    }

    /// Dense copy of the saddle matrix, for tests and small problems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n_unknowns();
        let m = self.n_constraints();
        let mut k = vec![vec![0.0; n + m]; n + m];
        for (i, j, v) in self.h.triplets() {
            k[i][j] += v;
        }
        for (r, c, v) in self.a.triplets() {
            k[n + r][c] += v;
            k[c][n + r] += v;
        }
        k
    }
}

/// Build the saddle system of a frame.
pub fn assemble_kkt(frame: &DopplerFrame, bc: &BoundaryConditionSet, lambda_s: f64) -> Result<KktSystem> {
    if !(lambda_s >= 0.0) || !lambda_s.is_finite() {
        return Err(VfmError::InvalidArgument(format!("lambda_s = {lambda_s}")));
    }
    let grid = frame.grid();
    let seg = frame.seg();
    let index = CellIndex::new(seg);
    let n = index.len();
    if n == 0 {
        return Err(VfmError::EmptyCavity("no cavity cells".into()));
    }
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); 2 * n];
    let mut f = vec![0.0; 2 * n];
    let mut n_data = 0;
    for (k, &(i, j)) in index.cells().iter().enumerate() {
        let w = frame.weights()[[i, j]];
        if frame.valid()[[i, j]] && w > 0.0 {
            rows[k].push((k, w));
            f[k] = w * frame.v_d()[[i, j]];
            n_data += 1;
        }
    }
    if n_data == 0 {
        return Err(VfmError::InvalidArgument("frame has no valid weighted samples".into()));
    }
    if lambda_s > 0.0 {
        let s = smoothing_operator(grid, seg, &index);
        for r in 0..s.rows() {
            let entries: Vec<(usize, f64)> = s.row(r).collect();
            for &(a, va) in &entries {
                for &(b, vb) in &entries {
                    let q = lambda_s * va * vb;
                    rows[a].push((b, q));
                    rows[n + a].push((n + b, q));
                }
            }
        }
    }
    let trace: f64 = rows
        .iter()
        .enumerate()
        .map(|(r, e)| e.iter().filter(|(c, _)| *c == r).map(|(_, v)| v).sum::<f64>())
        .sum();
    let delta = DELTA_REL * (trace / (2 * n) as f64).max(f64::MIN_POSITIVE);
    let mut hb = CsrBuilder::new(2 * n);
    for (r, mut e) in rows.into_iter().enumerate() {
        e.push((r, delta));
        hb.push_row(&e);
    }
    let h = hb.finish();

    let (dr, dt) = (grid.dr(), grid.dtheta());
    let mut ab = CsrBuilder::new(2 * n);
    let mut rhs_c = Vec::new();
    let mut row_cell = Vec::new();
    for (k, &(i, j)) in index.cells().iter().enumerate() {
        let (ii, jj) = (i as isize, j as isize);
        let nb = [
            index.get_signed(ii - 1, jj),
            index.get_signed(ii + 1, jj),
            index.get_signed(ii, jj - 1),
            index.get_signed(ii, jj + 1),
        ];
        if let [Some(rm), Some(rp), Some(tm), Some(tp)] = nb {
            let r = grid.radius(i);
            let cr = r / (2.0 * dr);
            let ct = 1.0 / (2.0 * dt);
            ab.push_row(&[(rp, cr), (rm, -cr), (k, 1.0), (n + tp, ct), (n + tm, -ct)]);
            rhs_c.push(0.0);
            row_cell.push(k);
        }
    }
    let n_c1 = rhs_c.len();
    for s in &bc.samples {
        let (i, j) = s.grid_index;
        if i >= grid.n_r() || j >= grid.n_theta() {
            return Err(VfmError::ShapeMismatch(format!("wall sample ({i},{j}) is off the grid")));
        }
        let k = index
            .get(i, j)
            .ok_or_else(|| VfmError::ShapeMismatch(format!("wall sample ({i},{j}) lies outside the cavity")))?;
        let entries: Vec<(usize, f64)> = [(k, s.normal[0]), (n + k, s.normal[1])]
            .into_iter()
            .filter(|(_, v)| *v != 0.0)
            .collect();
        if entries.is_empty() {
            return Err(VfmError::InvalidArgument(format!("wall sample ({i},{j}) has a zero normal")));
        }
        ab.push_row(&entries);
        rhs_c.push(s.wall_velocity[0] * s.normal[0] + s.wall_velocity[1] * s.normal[1]);
        row_cell.push(k);
    }
    let n_c2 = rhs_c.len() - n_c1;
    let a = ab.finish();
    // Scale of the Schur complement A H^-1 A', so the dual shift is small
    // relative to it whatever lambda_s is.
    let mean_row_sq = a.triplets().map(|(_, _, v)| v * v).sum::<f64>() / a.rows().max(1) as f64;
    let dual_delta = DELTA_REL * mean_row_sq / (trace / (2 * n) as f64 + delta);
    if rhs_c.len() >= 2 * n {
        return Err(VfmError::InvalidArgument(format!(
            "{} constraints for {} unknowns",
            rhs_c.len(),
            2 * n
        )));
    }
    Ok(KktSystem {
        h,
        a,
        rhs_primal: f,
        rhs_constraint: rhs_c,
        index,
        n_data,
        n_c1,
        n_c2,
        delta,
        dual_delta,
        row_cell,
    })
}

/// How the saddle system was solved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    BandedLdl,
    LeastNorm,
}

#[derive(Clone, Debug)]
pub struct IvfmSolution {
    pub field: VelocityField,
    pub x: Vec<f64>,
    pub multipliers: Vec<f64>,
    /// `||A x - b||_inf`
    pub constraint_residual: f64,
    pub method: SolveMethod,
    pub refinement_steps: usize,
    /// Set when the factorization failed and the least-norm fallback ran.
    pub flagged: bool,
}

/// Symmetric ordering keeping every stencil coupling close to the diagonal:
/// cells sweep the longer lattice axis in the outer loop, each followed by
/// its two unknowns and the constraint rows it owns.
fn band_ordering(sys: &KktSystem) -> Vec<usize> {
    let n = sys.n_cells();
    let cells = sys.index.cells();
    let (i_lo, i_hi) = cells.iter().fold((usize::MAX, 0), |(a, b), c| (a.min(c.0), b.max(c.0)));
    let (j_lo, j_hi) = cells.iter().fold((usize::MAX, 0), |(a, b), c| (a.min(c.1), b.max(c.1)));
    let r_inner = (i_hi - i_lo) <= (j_hi - j_lo);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&k| {
        let (i, j) = cells[k];
        if r_inner {
            (j, i)
        } else {
            (i, j)
        }
    });
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (row, &k) in sys.row_cell.iter().enumerate() {
        owned[k].push(row);
    }
    let mut perm = Vec::with_capacity(2 * n + sys.n_constraints());
    for k in order {
        perm.push(k);
        perm.push(n + k);
        perm.extend(owned[k].iter().map(|&r| 2 * n + r));
    }
    perm
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

const MAX_REFINEMENT: usize = 20;

/// Solve the saddle system: banded LDL' of the quasi-definite
/// regularization `[[H, A'], [A, -dual_delta I]]`, then iterative refinement
/// against the unregularized system.
pub fn solve_kkt(sys: &KktSystem) -> Result<(Vec<f64>, SolveMethod, usize)> {
    let n = sys.n_unknowns();
    let m = sys.n_constraints();
    let total = n + m;
    let perm = band_ordering(sys);
    let mut pos = vec![0usize; total];
    for (p, &old) in perm.iter().enumerate() {
        pos[old] = p;
    }
    let mut bw = 0;
    for (i, j, _) in sys.h.triplets() {
        bw = bw.max(pos[i].abs_diff(pos[j]));
    }
    for (r, c, _) in sys.a.triplets() {
        bw = bw.max(pos[n + r].abs_diff(pos[c]));
    }
    let mut band = BandMatrix::zeros(total, bw);
    for (i, j, v) in sys.h.triplets() {
        if pos[i] >= pos[j] {
            band.add(pos[i], pos[j], v);
        }
    }
    for (r, c, v) in sys.a.triplets() {
        band.add(pos[n + r], pos[c], v);
    }
    for r in 0..m {
        band.add(pos[n + r], pos[n + r], -sys.dual_delta);
    }
    let rhs = sys.rhs();
    let rhs_norm = inf_norm(&rhs).max(1.0);
    let factor = match band.factor() {
        Ok(f) => f,
        Err(_) => return least_norm(sys).map(|z| (z, SolveMethod::LeastNorm, 0)),
    };
    let permuted_solve = |r: &[f64]| -> Vec<f64> {
        let rp: Vec<f64> = perm.iter().map(|&old| r[old]).collect();
        let zp = factor.solve(&rp);
        let mut z = vec![0.0; total];
        for (p, &old) in perm.iter().enumerate() {
            z[old] = zp[p];
        }
        z
    };
    let mut z = permuted_solve(&rhs);
    let mut steps = 0;
    let mut best = f64::INFINITY;
    for _ in 0..MAX_REFINEMENT {
        let kz = sys.kkt_matvec(&z);
        let res: Vec<f64> = rhs.iter().zip(&kz).map(|(b, k)| b - k).collect();
        let rn = inf_norm(&res);
        if !rn.is_finite() {
            break;
        }
        if rn <= 1e-14 * rhs_norm || rn >= best {
            break;
        }
        best = rn;
        let dz = permuted_solve(&res);
        for (a, b) in z.iter_mut().zip(&dz) {
            *a += b;
        }
        steps += 1;
    }
    let x_ok = z.iter().all(|v| v.is_finite()) && sys.constraint_residual(&z[..n]) < 1e-8 * rhs_norm;
    if !x_ok {
        return least_norm(sys).map(|z| (z, SolveMethod::LeastNorm, steps));
    }
    Ok((z, SolveMethod::BandedLdl, steps))
}

/// Minimum-norm least-squares solution of the saddle system.
fn least_norm(sys: &KktSystem) -> Result<Vec<f64>> {
    let total = sys.n_unknowns() + sys.n_constraints();
    let rhs = sys.rhs();
    let (z, res, _) = lsqr::lsqr(
        |v| sys.kkt_matvec(v),
        |v| sys.kkt_matvec(v),
        &rhs,
        total,
        1e-14,
        20 * total,
    );
    if z.iter().any(|v| !v.is_finite()) {
        return Err(VfmError::Optimization(format!("least-norm fallback diverged (residual {res})")));
    }
    Ok(z)
}

/// Reconstruct a frame with smoothing weight `lambda_s`.
pub fn ivfm_solve(frame: &DopplerFrame, bc: &BoundaryConditionSet, lambda_s: f64) -> Result<IvfmSolution> {
    let sys = assemble_kkt(frame, bc, lambda_s)?;
    let (z, method, steps) = solve_kkt(&sys)?;
    let n = sys.n_unknowns();
    let nc = sys.n_cells();
    let mut field = VelocityField::zeros(frame.grid());
    for (k, &(i, j)) in sys.index.cells().iter().enumerate() {
        field.v_r_mut()[[i, j]] = z[k];
        field.v_theta_mut()[[i, j]] = z[nc + k];
    }
    Ok(IvfmSolution {
        field,
        constraint_residual: sys.constraint_residual(&z[..n]),
        x: z[..n].to_vec(),
        multipliers: z[n..].to_vec(),
        method,
        refinement_steps: steps,
        flagged: method == SolveMethod::LeastNorm,
    })
}

/// Solver report of one frame, as stored next to the solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvfmDiagnostics {
    pub lambda_s: f64,
    pub method: SolveMethod,
    pub refinement_steps: usize,
    pub constraint_residual: f64,
    pub n_unknowns: usize,
    pub n_constraints: usize,
    pub multipliers: VectorStats,
}

impl IvfmSolution {
    pub fn diagnostics(&self, lambda_s: f64) -> IvfmDiagnostics {
        IvfmDiagnostics {
            lambda_s,
            method: self.method,
            refinement_steps: self.refinement_steps,
            constraint_residual: self.constraint_residual,
            n_unknowns: self.x.len(),
            n_constraints: self.multipliers.len(),
            multipliers: VectorStats::of(&self.multipliers),
        }
    }
}

/// A phantom frame with its wall samples and ground truth.
#[derive(Clone, Debug)]
pub struct CalibrationFrame {
    pub frame: DopplerFrame,
    pub bc: BoundaryConditionSet,
    pub truth: VelocityField,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub best: f64,
    /// `(lambda_s, median nRMSE %)` per candidate, in input order.
    pub curve: Vec<(f64, f64)>,
}

/// Pick the smoothing weight with the lowest median nRMSE over `frames`.
pub fn calibrate_lambda(frames: &[CalibrationFrame], candidates: &[f64], policy: ExecPolicy) -> Result<CalibrationResult> {
    if frames.is_empty() || candidates.is_empty() {
        return Err(VfmError::InvalidArgument("calibration needs frames and candidates".into()));
    }
    let scores = map_items(policy, candidates, |&lam| -> Result<f64> {
        let errs = frames
            .iter()
            .map(|c| {
                let sol = ivfm_solve(&c.frame, &c.bc, lam)?;
                let mask: Vec<bool> = c.frame.seg().mask().iter().copied().collect();
                nrmse(&sol.field, &c.truth, &mask)
            })
            .collect::<Result<Vec<f64>>>()?;
        median(&errs)
    });
    let mut curve = Vec::with_capacity(candidates.len());
    for (&lam, s) in candidates.iter().zip(scores) {
        curve.push((lam, s?));
    }
    let best = curve
        .iter()
        .fold(None::<(f64, f64)>, |acc, &(l, e)| match acc {
            Some((_, be)) if be <= e => acc,
            _ => Some((l, e)),
        })
        .expect("non-empty")
        .0;
    Ok(CalibrationResult { best, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{extract_boundary, PolarGrid, Segmentation};
    use crate::phantom::synthesize_doppler;
    use ndarray::Array2;

    /// A 3x3 cavity inside a 5x5 lattice.
    fn toy(valid_center_only: bool) -> (DopplerFrame, BoundaryConditionSet) {
        let grid = PolarGrid::new(5, 5, 0.05, 0.01, -0.1, 0.05).unwrap();
        let seg = Segmentation::new(Array2::from_shape_fn((5, 5), |(i, j)| {
            (1..=3).contains(&i) && (1..=3).contains(&j)
        }))
        .unwrap();
        let vr = Array2::from_shape_fn((5, 5), |(i, j)| 0.1 * i as f64 - 0.05 * j as f64);
        let field = VelocityField::new(vr, Array2::zeros((5, 5))).unwrap();
        let mut frame = synthesize_doppler(&field, &grid, &seg, f64::INFINITY, 0).unwrap();
        if valid_center_only {
            let mut valid = Array2::from_elem((5, 5), false);
            valid[[2, 2]] = true;
            frame = DopplerFrame::new(grid, seg.clone(), frame.v_d().clone(), frame.weights().clone(), valid).unwrap();
        }
        let bc = extract_boundary(&seg, &grid, None).unwrap();
        (frame, bc)
    }

    #[test]
    fn three_by_three_row_counts() {
        let (frame, bc) = toy(true);
        let sys = assemble_kkt(&frame, &bc, 1e-3).unwrap();
        assert_eq!((sys.n_data, sys.n_c1, sys.n_c2), (1, 1, 8));
        assert_eq!(sys.n_unknowns(), 18);
    }

    #[test]
    fn no_smoothing_gives_diagonal_h() {
        let (frame, bc) = toy(false);
        let sys = assemble_kkt(&frame, &bc, 0.0).unwrap();
        assert!(sys.h.triplets().all(|(i, j, _)| i == j));
    }

    #[test]
    fn zero_data_gives_zero_field() {
        let grid = PolarGrid::sector(8, 10).unwrap();
        let seg = crate::grid::sector_segmentation(&grid, 1).unwrap();
        let frame = synthesize_doppler(&VelocityField::zeros(&grid), &grid, &seg, f64::INFINITY, 0).unwrap();
        let bc = extract_boundary(&seg, &grid, None).unwrap();
        let sol = ivfm_solve(&frame, &bc, DEFAULT_LAMBDA_S).unwrap();
        assert!(sol.x.iter().all(|&v| v == 0.0));
        assert!(!sol.flagged);
    }

    #[test]
    fn rejects_negative_lambda_and_empty_data() {
        let (frame, bc) = toy(false);
        assert!(assemble_kkt(&frame, &bc, -1.0).is_err());
        let grid = *frame.grid();
        let empty = DopplerFrame::new(
            grid,
            frame.seg().clone(),
            frame.v_d().clone(),
            frame.weights().clone(),
            Array2::from_elem((5, 5), false),
        )
        .unwrap();
        assert!(assemble_kkt(&empty, &bc, 0.0).is_err());
    }
}
