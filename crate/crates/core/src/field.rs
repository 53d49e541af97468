use ndarray::Array2;

use crate::error::{Result, VfmError};
use crate::grid::{PolarGrid, Segmentation};

/// Polar velocity components on a lattice, in m/s.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    v_r: Array2<f64>,
    v_theta: Array2<f64>,
}

impl VelocityField {
    pub fn new(v_r: Array2<f64>, v_theta: Array2<f64>) -> Result<Self> {
        if v_r.dim() != v_theta.dim() {
            return Err(VfmError::ShapeMismatch(format!(
                "v_r {:?} vs v_theta {:?}",
                v_r.dim(),
                v_theta.dim()
            )));
        }
        if v_r.iter().chain(v_theta.iter()).any(|v| !v.is_finite()) {
            return Err(VfmError::NonFinite("velocity field".into()));
        }
        Ok(Self { v_r, v_theta })
    }

    pub fn zeros(grid: &PolarGrid) -> Self {
        Self {
            v_r: Array2::zeros(grid.shape()),
            v_theta: Array2::zeros(grid.shape()),
        }
    }

    pub fn v_r(&self) -> &Array2<f64> {
        &self.v_r
    }

    pub fn v_theta(&self) -> &Array2<f64> {
        &self.v_theta
    }

    pub fn v_r_mut(&mut self) -> &mut Array2<f64> {
        &mut self.v_r
    }

    pub fn v_theta_mut(&mut self) -> &mut Array2<f64> {
        &mut self.v_theta
    }

    pub fn shape(&self) -> (usize, usize) {
        self.v_r.dim()
    }

    pub fn component(&self, c: Component) -> &Array2<f64> {
        match c {
            Component::Radial => &self.v_r,
            Component::Angular => &self.v_theta,
        }
    }

    /// Zero every cell outside the cavity.
    pub fn masked(mut self, seg: &Segmentation) -> Self {
        for ((i, j), &m) in seg.mask().indexed_iter() {
            if !m {
                self.v_r[[i, j]] = 0.0;
                self.v_theta[[i, j]] = 0.0;
            }
        }
        self
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            v_r: &self.v_r * s,
            v_theta: &self.v_theta * s,
        }
    }

    pub(crate) fn check_grid(&self, grid: &PolarGrid) -> Result<()> {
        grid.check_shape(self.v_r.shape(), "velocity field")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Radial,
    Angular,
}
