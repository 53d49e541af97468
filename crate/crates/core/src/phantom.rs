//! Synthetic ground truth and Doppler observations.
//!
//! Flows come from a stream function `psi(r, theta)` built from products of
//! sines over the cavity bounding box, so the velocity
//! `v_r = (1/r) dpsi/dtheta`, `v_theta = -dpsi/dr` is divergence free in
//! closed form and tangent to the box edges.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfmError};
use crate::field::VelocityField;
use crate::grid::{PolarGrid, Segmentation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamTerm {
    /// m^2/s
    pub amplitude: f64,
    pub mode_r: u32,
    pub mode_theta: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamFunctionSpec {
    pub terms: Vec<StreamTerm>,
}

/// Physical extent of the cavity bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CavityBox {
    pub r_a: f64,
    pub r_b: f64,
    pub theta_a: f64,
    pub theta_b: f64,
}

impl CavityBox {
    pub fn of(seg: &Segmentation, grid: &PolarGrid) -> Result<Self> {
        seg.check_grid(grid)?;
        let b = seg.bounding_box();
        if b.i_max <= b.i_min || b.j_max <= b.j_min {
            return Err(VfmError::InvalidArgument(
                "cavity bounding box has zero extent".into(),
            ));
        }
        Ok(Self {
            r_a: grid.radius(b.i_min),
            r_b: grid.radius(b.i_max),
            theta_a: grid.angle(b.j_min),
            theta_b: grid.angle(b.j_max),
        })
    }

    pub fn radial_extent(&self) -> f64 {
        self.r_b - self.r_a
    }

    pub fn angular_extent(&self) -> f64 {
        self.theta_b - self.theta_a
    }
}

/// Closed-form velocity and the two derivatives entering mass conservation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSample {
    pub v_r: f64,
    pub v_theta: f64,
    pub dvr_dr: f64,
    pub dvtheta_dtheta: f64,
}

impl StreamFunctionSpec {
    pub fn single_vortex(amplitude: f64) -> Self {
        Self {
            terms: vec![StreamTerm {
                amplitude,
                mode_r: 1,
                mode_theta: 1,
            }],
        }
    }

    pub fn psi(&self, bx: &CavityBox, r: f64, theta: f64) -> f64 {
        let (lr, lt) = (bx.radial_extent(), bx.angular_extent());
        self.terms
            .iter()
            .map(|t| {
                let a = t.mode_r as f64 * PI / lr;
                let b = t.mode_theta as f64 * PI / lt;
                t.amplitude * (a * (r - bx.r_a)).sin() * (b * (theta - bx.theta_a)).sin()
            })
            .sum()
    }

    /// Analytic velocity and derivatives at `(r, theta)`.
    pub fn sample(&self, bx: &CavityBox, r: f64, theta: f64) -> FlowSample {
        let (lr, lt) = (bx.radial_extent(), bx.angular_extent());
        let mut out = FlowSample {
            v_r: 0.0,
            v_theta: 0.0,
            dvr_dr: 0.0,
            dvtheta_dtheta: 0.0,
        };
        for t in &self.terms {
            let a = t.mode_r as f64 * PI / lr;
            let b = t.mode_theta as f64 * PI / lt;
            let (sr, cr) = (a * (r - bx.r_a)).sin_cos();
            let (st, ct) = (b * (theta - bx.theta_a)).sin_cos();
            let amp = t.amplitude;
            // psi_theta = A b sr ct ; v_r = psi_theta / r
            out.v_r += amp * b * sr * ct / r;
            out.dvr_dr += amp * b * ct * (a * cr / r - sr / (r * r));
            // v_theta = -psi_r = -A a cr st
            out.v_theta += -amp * a * cr * st;
            out.dvtheta_dtheta += -amp * a * b * cr * ct;
        }
        out
    }
}

/// Ground-truth field of `spec` on the cavity; zero outside it.
pub fn stream_function_field(
    spec: &StreamFunctionSpec,
    grid: &PolarGrid,
    seg: &Segmentation,
) -> Result<VelocityField> {
    let bx = CavityBox::of(seg, grid)?;
    let mut v_r = Array2::zeros(grid.shape());
    let mut v_t = Array2::zeros(grid.shape());
    for (i, j) in seg.cells() {
        let (r, th) = grid.position(i, j);
        let s = spec.sample(&bx, r, th);
        v_r[[i, j]] = s.v_r;
        v_t[[i, j]] = s.v_theta;
    }
    VelocityField::new(v_r, v_t)
}

/// Observed color Doppler frame (sign-inverted: positive = away from probe).
#[derive(Clone, Debug, PartialEq)]
pub struct DopplerFrame {
    grid: PolarGrid,
    seg: Segmentation,
    v_d: Array2<f64>,
    weights: Array2<f64>,
    valid: Array2<bool>,
}

impl DopplerFrame {
    pub fn new(
        grid: PolarGrid,
        seg: Segmentation,
        v_d: Array2<f64>,
        weights: Array2<f64>,
        valid: Array2<bool>,
    ) -> Result<Self> {
        seg.check_grid(&grid)?;
        grid.check_shape(v_d.shape(), "v_d")?;
        grid.check_shape(weights.shape(), "weights")?;
        grid.check_shape(valid.shape(), "valid")?;
        for ((i, j), &ok) in valid.indexed_iter() {
            if ok && !seg.contains(i, j) {
                return Err(VfmError::InvalidArgument(format!(
                    "cell ({i},{j}) is valid but outside the cavity"
                )));
            }
            if ok && !v_d[[i, j]].is_finite() {
                return Err(VfmError::NonFinite(format!("v_d at ({i},{j})")));
            }
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(VfmError::InvalidArgument("weights must lie in [0, 1]".into()));
        }
        Ok(Self {
            grid,
            seg,
            v_d,
            weights,
            valid,
        })
    }

    pub fn grid(&self) -> &PolarGrid {
        &self.grid
    }
    pub fn seg(&self) -> &Segmentation {
        &self.seg
    }
    pub fn v_d(&self) -> &Array2<f64> {
        &self.v_d
    }
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }
    pub fn valid(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Scanlines with at least one valid sample.
    pub fn valid_scanlines(&self) -> Vec<usize> {
        (0..self.grid.n_theta())
            .filter(|&j| (0..self.grid.n_r()).any(|i| self.valid[[i, j]]))
            .collect()
    }

    /// Largest |v_D| over valid cells.
    pub fn max_abs_velocity(&self) -> f64 {
        self.valid
            .indexed_iter()
            .filter(|(_, &v)| v)
            .map(|(ij, _)| self.v_d[ij].abs())
            .fold(0.0, f64::max)
    }

    /// Replace `weights` by a radially decaying synthetic power map,
    /// from 1 at the shallowest cavity sample to `floor` at the deepest.
    pub fn with_power_weights(mut self, floor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&floor) {
            return Err(VfmError::InvalidArgument("floor must lie in [0, 1]".into()));
        }
        let b = self.seg.bounding_box();
        let span = (b.i_max - b.i_min).max(1) as f64;
        for ((i, j), w) in self.weights.indexed_iter_mut() {
            if self.valid[[i, j]] {
                let t = (i.saturating_sub(b.i_min)) as f64 / span;
                *w = 1.0 - (1.0 - floor) * t.min(1.0);
            }
        }
        Ok(self)
    }
}

fn rms_over(values: &Array2<f64>, seg: &Segmentation) -> f64 {
    let n = seg.count() as f64;
    let ss: f64 = seg
        .mask()
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|(ij, _)| values[ij] * values[ij])
        .sum();
    (ss / n).sqrt()
}

/// Noise standard deviation for an amplitude SNR in dB.
pub fn noise_sigma(field: &VelocityField, seg: &Segmentation, snr_db: f64) -> f64 {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return 0.0;
    }
    rms_over(field.v_r(), seg) * 10f64.powf(-snr_db / 20.0)
}

/// Doppler frame observing the radial component of `field` with additive
/// white Gaussian noise; `snr_db = +inf` gives exact data. Weights are one
/// inside the cavity.
pub fn synthesize_doppler(
    field: &VelocityField,
    grid: &PolarGrid,
    seg: &Segmentation,
    snr_db: f64,
    seed: u64,
) -> Result<DopplerFrame> {
    field.check_grid(grid)?;
    seg.check_grid(grid)?;
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(VfmError::InvalidArgument(format!("snr_db = {snr_db}")));
    }
    let sigma = noise_sigma(field, seg, snr_db);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v_d = Array2::zeros(grid.shape());
    let mut weights = Array2::zeros(grid.shape());
    for (i, j) in seg.cells() {
        let eta = if sigma > 0.0 {
            sigma * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        v_d[[i, j]] = field.v_r()[[i, j]] + eta;
        weights[[i, j]] = 1.0;
    }
    DopplerFrame::new(*grid, seg.clone(), v_d, weights, seg.mask().clone())
}

/// Data-removal protocols applied to a Doppler frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DegradeSpec {
    /// Walking outward from the center scanline, keep the first of every `m`
    /// scanlines and drop the following `n`.
    SparseDeterministic { m: usize, n: usize },
    /// Per group of `m` scanlines drop a block of `Uniform{0..=n}` scanlines
    /// at a random offset.
    SparseRandom { m: usize, n: usize, seed: u64 },
    /// Drop the outermost `ceil(pct/100 * n_theta)` scanlines, split between
    /// both sides.
    Truncate { pct: f64 },
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DegradeSpec::SparseDeterministic { m, n } | DegradeSpec::SparseRandom { m, n, .. } => {
                if m == 0 || n >= m {
                    return Err(VfmError::InvalidArgument(format!(
                        "sparse masking needs 0 <= n < m, got m={m}, n={n}"
                    )));
                }
            }
            DegradeSpec::Truncate { pct } => {
                if !(0.0..100.0).contains(&pct) {
                    return Err(VfmError::InvalidArgument(format!(
                        "truncation percentage {pct} outside [0, 100)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Scanlines removed by this spec on a sector of `n_theta` scanlines.
    pub fn removed_scanlines(&self, n_theta: usize) -> Result<Vec<bool>> {
        self.validate()?;
        let center = n_theta / 2;
        // outward distance from the center; the center itself belongs to the
        // right-hand side.
        let side_distance = |j: usize| -> (usize, usize) {
            if j >= center {
                (1, j - center)
            } else {
                (0, center - j)
            }
        };
        let mut removed = vec![false; n_theta];
        match *self {
            DegradeSpec::SparseDeterministic { m, n } => {
                for (j, out) in removed.iter_mut().enumerate() {
                    let p = side_distance(j).1 % m;
                    *out = p >= 1 && p <= n;
                }
            }
            DegradeSpec::SparseRandom { m, n, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let groups_right = (n_theta - center).div_ceil(m);
                let groups_left = (center + 1).div_ceil(m);
                let mut blocks = [Vec::new(), Vec::new()];
                for (side, count) in [(1usize, groups_right), (0usize, groups_left)] {
                    for _ in 0..count {
                        let len = rng.gen_range(0..=n);
                        let start = rng.gen_range(0..=(m - len));
                        blocks[side].push((start, len));
                    }
                }
                for (j, out) in removed.iter_mut().enumerate() {
                    let (side, d) = side_distance(j);
                    let (start, len) = blocks[side][d / m];
                    let p = d % m;
                    *out = p >= start && p < start + len;
                }
            }
            DegradeSpec::Truncate { pct } => {
                let k = truncated_count(pct, n_theta);
                let left = k / 2;
                let right = k - left;
                for (j, out) in removed.iter_mut().enumerate() {
                    *out = j < left || j >= n_theta - right;
                }
            }
        }
        Ok(removed)
    }
}

/// `ceil(pct/100 * n)`, robust to the representation error of `pct`.
pub fn truncated_count(pct: f64, n: usize) -> usize {
    let x = pct * n as f64 / 100.0;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).min(n)
}

/// Invalidate scanlines according to `spec`. Removed cells get zero weight
/// and zero data; surviving cells are untouched.
pub fn degrade(frame: &DopplerFrame, spec: &DegradeSpec) -> Result<DopplerFrame> {
    let removed = spec.removed_scanlines(frame.grid.n_theta())?;
    let mut out = frame.clone();
    for ((i, j), ok) in out.valid.indexed_iter_mut() {
        if removed[j] && *ok {
            *ok = false;
            out.weights[[i, j]] = 0.0;
            out.v_d[[i, j]] = 0.0;
        }
    }
    Ok(out)
}
