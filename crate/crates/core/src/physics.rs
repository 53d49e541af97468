//! Residuals, penalties and finite-difference operators.
//!
//! Derivatives are taken in physical units: per meter along `r`, per radian
//! along `theta`, with `r` in meters. Reductions are sums over samples.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfmError};
use crate::field::VelocityField;
use crate::grid::{CellIndex, PolarGrid, Segmentation};
use crate::sparse::{CsrBuilder, CsrMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuberConfig {
    pub beta: f64,
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

impl HuberConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(VfmError::InvalidArgument(format!("huber beta {beta}")));
        }
        Ok(Self { beta })
    }
}

/// Smooth-L1: `0.5 x^2 / beta` below `beta`, `|x| - 0.5 beta` above.
#[inline]
pub fn huber(x: f64, cfg: HuberConfig) -> f64 {
    let a = x.abs();
    if a < cfg.beta {
        0.5 * x * x / cfg.beta
    } else {
        a - 0.5 * cfg.beta
    }
}

/// Derivative of [`huber`] with respect to `x`.
#[inline]
pub fn huber_grad(x: f64, cfg: HuberConfig) -> f64 {
    if x.abs() < cfg.beta {
        x / cfg.beta
    } else {
        x.signum()
    }
}

/// The four loss terms of a PINN objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// data fidelity
    pub l1: f64,
    /// mass conservation
    pub l2: f64,
    /// free-slip wall condition
    pub l3: f64,
    /// smoothing energy
    pub l4: f64,
}

impl LossBreakdown {
    pub fn as_array(&self) -> [f64; 4] {
        [self.l1, self.l2, self.l3, self.l4]
    }

    pub fn is_valid(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// `r dv_r/dr + v_r + dv_theta/dtheta`, i.e. `r div(v)` in polar coordinates.
pub fn c1_residual(r: f64, v_r: f64, dvr_dr: f64, dvtheta_dtheta: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(VfmError::InvalidArgument(format!("radius {r} must be positive")));
    }
    Ok(r * dvr_dr + v_r + dvtheta_dtheta)
}

/// `(v - v_w) . n_w`
pub fn c2_residual(v: [f64; 2], v_w: [f64; 2], n_w: [f64; 2]) -> Result<f64> {
    let len = n_w[0].hypot(n_w[1]);
    if (len - 1.0).abs() > 1e-9 {
        return Err(VfmError::InvalidArgument(format!(
            "wall normal has length {len}"
        )));
    }
    Ok((v[0] - v_w[0]) * n_w[0] + (v[1] - v_w[1]) * n_w[1])
}

/// Cells whose full 3x3 neighbourhood lies inside the cavity.
pub fn smoothing_stencil_cells(seg: &Segmentation) -> Vec<(usize, usize)> {
    seg.cells()
        .into_iter()
        .filter(|&(i, j)| {
            (-1..=1).all(|di| {
                (-1..=1).all(|dj| seg.contains_signed(i as isize + di, j as isize + dj))
            })
        })
        .collect()
}

/// Second derivatives of one component at a stencil center, already scaled
/// as `(r^2 d2/dr2, r d2/drdtheta, d2/dtheta2)`.
fn scaled_second_derivatives(v: &Array2<f64>, grid: &PolarGrid, i: usize, j: usize) -> [f64; 3] {
    let (dr, dt) = (grid.dr(), grid.dtheta());
    let r = grid.radius(i);
    let d_rr = (v[[i + 1, j]] - 2.0 * v[[i, j]] + v[[i - 1, j]]) / (dr * dr);
    let d_tt = (v[[i, j + 1]] - 2.0 * v[[i, j]] + v[[i, j - 1]]) / (dt * dt);
    let d_rt = (v[[i + 1, j + 1]] - v[[i + 1, j - 1]] - v[[i - 1, j + 1]] + v[[i - 1, j - 1]])
        / (4.0 * dr * dt);
    [r * r * d_rr, r * d_rt, d_tt]
}

/// Sum over both components and over cells with a full 3x3 stencil of
/// `(r^2 v_rr)^2 + 2 (r v_rt)^2 + (v_tt)^2`.
pub fn smoothing_energy(field: &VelocityField, grid: &PolarGrid, seg: &Segmentation) -> Result<f64> {
    field.check_grid(grid)?;
    seg.check_grid(grid)?;
    let mut e = 0.0;
    for (i, j) in smoothing_stencil_cells(seg) {
        for v in [field.v_r(), field.v_theta()] {
            let [a, b, c] = scaled_second_derivatives(v, grid, i, j);
            e += a * a + 2.0 * b * b + c * c;
        }
    }
    Ok(e)
}

/// Linear map `S` with `||S v||^2` equal to the per-component smoothing
/// energy, acting on values indexed by a [`CellIndex`].
///
/// Rows come in triples per stencil cell: `r^2 D_rr`, `sqrt(2) r D_rt`,
/// `D_tt`.
pub fn smoothing_operator(grid: &PolarGrid, seg: &Segmentation, index: &CellIndex) -> CsrMatrix {
    let (dr, dt) = (grid.dr(), grid.dtheta());
    let mut b = CsrBuilder::new(index.len());
    let at = |i: usize, j: usize| index.get(i, j).expect("stencil cell inside cavity");
    for (i, j) in smoothing_stencil_cells(seg) {
        let r = grid.radius(i);
        let krr = r * r / (dr * dr);
        b.push_row(&[(at(i - 1, j), krr), (at(i, j), -2.0 * krr), (at(i + 1, j), krr)]);
        let krt = std::f64::consts::SQRT_2 * r / (4.0 * dr * dt);
        b.push_row(&[
            (at(i + 1, j + 1), krt),
            (at(i + 1, j - 1), -krt),
            (at(i - 1, j + 1), -krt),
            (at(i - 1, j - 1), krt),
        ]);
        let ktt = 1.0 / (dt * dt);
        b.push_row(&[(at(i, j - 1), ktt), (at(i, j), -2.0 * ktt), (at(i, j + 1), ktt)]);
    }
    b.finish()
}

/// How the first derivatives at a cell were discretized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StencilKind {
    Skipped,
    /// At least one direction uses a one-sided difference.
    OneSided,
    /// Central differences in both directions.
    Central,
}

/// Grid mass-conservation residual per cell.
#[derive(Clone, Debug)]
pub struct ResidualLattice {
    pub values: Array2<f64>,
    pub kind: Array2<StencilKind>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ResidualNorm {
    Huber(HuberConfig),
    L1,
    /// Plain sum of residuals.
    Raw,
}

impl ResidualLattice {
    pub fn reduce(&self, norm: ResidualNorm) -> f64 {
        self.values
            .iter()
            .zip(self.kind.iter())
            .filter(|(_, k)| **k != StencilKind::Skipped)
            .map(|(&v, _)| match norm {
                ResidualNorm::Huber(cfg) => huber(v, cfg),
                ResidualNorm::L1 => v.abs(),
                ResidualNorm::Raw => v,
            })
            .sum()
    }

    /// RMS over cells with central differences in both directions.
    pub fn interior_rms(&self) -> f64 {
        let (mut ss, mut n) = (0.0, 0usize);
        for (&v, &k) in self.values.iter().zip(self.kind.iter()) {
            if k == StencilKind::Central {
                ss += v * v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            (ss / n as f64).sqrt()
        }
    }
}

/// First derivative along one axis from available neighbours.
fn first_difference(
    lo: Option<f64>,
    center: f64,
    hi: Option<f64>,
    h: f64,
) -> Option<(f64, bool)> {
    match (lo, hi) {
        (Some(a), Some(b)) => Some(((b - a) / (2.0 * h), true)),
        (None, Some(b)) => Some(((b - center) / h, false)),
        (Some(a), None) => Some(((center - a) / h, false)),
        (None, None) => None,
    }
}

/// Evaluate `r dv_r/dr + v_r + dv_theta/dtheta` by finite differences at
/// every cavity cell. A neighbour is usable when it is inside the cavity and
/// (if `valid` is given) valid; cells lacking a usable neighbour along an
/// axis are skipped.
pub fn pde_residual_lattice(
    field: &VelocityField,
    grid: &PolarGrid,
    seg: &Segmentation,
    valid: Option<&Array2<bool>>,
) -> Result<ResidualLattice> {
    field.check_grid(grid)?;
    seg.check_grid(grid)?;
    if let Some(v) = valid {
        grid.check_shape(v.shape(), "valid")?;
    }
    let usable = |i: isize, j: isize| -> bool {
        seg.contains_signed(i, j) && valid.is_none_or(|v| v[[i as usize, j as usize]])
    };
    let mut values = Array2::zeros(grid.shape());
    let mut kind = Array2::from_elem(grid.shape(), StencilKind::Skipped);
    let (vr, vt) = (field.v_r(), field.v_theta());
    for (i, j) in seg.cells() {
        let (si, sj) = (i as isize, j as isize);
        if !usable(si, sj) {
            continue;
        }
        let pick = |a: &Array2<f64>, di: isize, dj: isize| -> Option<f64> {
            usable(si + di, sj + dj).then(|| a[[(si + di) as usize, (sj + dj) as usize]])
        };
        let d_r = first_difference(pick(vr, -1, 0), vr[[i, j]], pick(vr, 1, 0), grid.dr());
        let d_t = first_difference(pick(vt, 0, -1), vt[[i, j]], pick(vt, 0, 1), grid.dtheta());
        if let (Some((dvr, cr)), Some((dvt, ct))) = (d_r, d_t) {
            values[[i, j]] = grid.radius(i) * dvr + vr[[i, j]] + dvt;
            kind[[i, j]] = if cr && ct {
                StencilKind::Central
            } else {
                StencilKind::OneSided
            };
        }
    }
    Ok(ResidualLattice { values, kind })
}

/// Reduced grid mass-conservation residual.
pub fn pde_residual_grid(
    field: &VelocityField,
    grid: &PolarGrid,
    seg: &Segmentation,
    valid: Option<&Array2<bool>>,
    norm: ResidualNorm,
) -> Result<f64> {
    Ok(pde_residual_lattice(field, grid, seg, valid)?.reduce(norm))
}
