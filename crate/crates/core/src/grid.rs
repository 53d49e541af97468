//! Polar sampling lattice, cavity masks and boundary extraction.
//!
//! Lattices are indexed `(i_r, i_theta)`: row `i` is a radial sample, column
//! `j` a scanline. Flattened storage is r-major (`i * n_theta + j`).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfmError};
use crate::field::VelocityField;

/// Default imaging sector: `r` in `[0.02, 0.12]` m over a 1.2 rad aperture.
pub const SECTOR_R0: f64 = 0.02;
pub const SECTOR_DEPTH: f64 = 0.10;
pub const SECTOR_THETA0: f64 = -0.6;
pub const SECTOR_APERTURE: f64 = 1.2;

/// Raw grid parameters as they appear in files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_r: usize,
    pub n_theta: usize,
    pub r0: f64,
    pub dr: f64,
    pub theta0: f64,
    pub dtheta: f64,
}

/// Regular `(r, theta)` lattice. Sample `(i, j)` sits at
/// `(r0 + i*dr, theta0 + j*dtheta)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct PolarGrid {
    n_r: usize,
    n_theta: usize,
    r0: f64,
    dr: f64,
    theta0: f64,
    dtheta: f64,
}

impl PolarGrid {
    pub fn new(
        n_r: usize,
        n_theta: usize,
        r0: f64,
        dr: f64,
        theta0: f64,
        dtheta: f64,
    ) -> Result<Self> {
        if n_r < 4 || n_theta < 4 {
            return Err(VfmError::InvalidGrid(format!(
                "need at least 4x4 samples, got {n_r}x{n_theta}"
            )));
        }
        if !(r0 > 0.0) || !r0.is_finite() {
            return Err(VfmError::InvalidGrid(format!(
                "first radius must be positive (divergence is singular at r = 0), got {r0}"
            )));
        }
        if !(dr > 0.0) || !(dtheta > 0.0) || !dr.is_finite() || !dtheta.is_finite() {
            return Err(VfmError::InvalidGrid(format!(
                "spacings must be positive, got dr={dr}, dtheta={dtheta}"
            )));
        }
        if !theta0.is_finite() {
            return Err(VfmError::InvalidGrid("theta0 is not finite".into()));
        }
        Ok(Self {
            n_r,
            n_theta,
            r0,
            dr,
            theta0,
            dtheta,
        })
    }

    /// Default apical sector discretized with `n_r` samples per scanline and
    /// `n_theta` scanlines.
    pub fn sector(n_r: usize, n_theta: usize) -> Result<Self> {
        Self::new(
            n_r,
            n_theta,
            SECTOR_R0,
            SECTOR_DEPTH / n_r as f64,
            SECTOR_THETA0,
            SECTOR_APERTURE / n_theta as f64,
        )
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }
    pub fn n_theta(&self) -> usize {
        self.n_theta
    }
    pub fn r0(&self) -> f64 {
        self.r0
    }
    pub fn dr(&self) -> f64 {
        self.dr
    }
    pub fn theta0(&self) -> f64 {
        self.theta0
    }
    pub fn dtheta(&self) -> f64 {
        self.dtheta
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_r, self.n_theta)
    }

    pub fn len(&self) -> usize {
        self.n_r * self.n_theta
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn radius(&self, i: usize) -> f64 {
        self.r0 + i as f64 * self.dr
    }

    pub fn angle(&self, j: usize) -> f64 {
        self.theta0 + j as f64 * self.dtheta
    }

    pub fn position(&self, i: usize, j: usize) -> (f64, f64) {
        (self.radius(i), self.angle(j))
    }

    pub fn spec(&self) -> GridSpec {
        (*self).into()
    }

    /// Grid covering the same sector with both spacings halved.
    pub fn refined(&self) -> Result<Self> {
        Self::new(
            2 * self.n_r,
            2 * self.n_theta,
            self.r0,
            self.dr / 2.0,
            self.theta0,
            self.dtheta / 2.0,
        )
    }

    pub(crate) fn check_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if shape != [self.n_r, self.n_theta] {
            return Err(VfmError::ShapeMismatch(format!(
                "{what} has shape {shape:?}, grid is {}x{}",
                self.n_r, self.n_theta
            )));
        }
        Ok(())
    }
}

impl TryFrom<GridSpec> for PolarGrid {
    type Error = VfmError;
    fn try_from(s: GridSpec) -> Result<Self> {
        PolarGrid::new(s.n_r, s.n_theta, s.r0, s.dr, s.theta0, s.dtheta)
    }
}

impl From<PolarGrid> for GridSpec {
    fn from(g: PolarGrid) -> Self {
        GridSpec {
            n_r: g.n_r,
            n_theta: g.n_theta,
            r0: g.r0,
            dr: g.dr,
            theta0: g.theta0,
            dtheta: g.dtheta,
        }
    }
}

/// Binary cavity mask; `true` marks cells inside the cavity.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    mask: Array2<bool>,
}

/// Inclusive index bounds of the cavity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexBox {
    pub i_min: usize,
    pub i_max: usize,
    pub j_min: usize,
    pub j_max: usize,
}

impl Segmentation {
    pub fn new(mask: Array2<bool>) -> Result<Self> {
        if !mask.iter().any(|&m| m) {
            return Err(VfmError::EmptyCavity("mask has no inside cell".into()));
        }
        Ok(Self { mask })
    }

    pub fn full(grid: &PolarGrid) -> Self {
        Self {
            mask: Array2::from_elem(grid.shape(), true),
        }
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.mask[[i, j]]
    }

    /// `contains` for signed indices; anything off the lattice is outside.
    pub fn contains_signed(&self, i: isize, j: isize) -> bool {
        let (n_r, n_t) = self.mask.dim();
        i >= 0 && j >= 0 && (i as usize) < n_r && (j as usize) < n_t && self.mask[[i as usize, j as usize]]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Inside cells in r-major order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.mask
            .indexed_iter()
            .filter(|(_, &m)| m)
            .map(|(ij, _)| ij)
            .collect()
    }

    pub fn bounding_box(&self) -> IndexBox {
        let mut b = IndexBox {
            i_min: usize::MAX,
            i_max: 0,
            j_min: usize::MAX,
            j_max: 0,
        };
        for ((i, j), &m) in self.mask.indexed_iter() {
            if m {
                b.i_min = b.i_min.min(i);
                b.i_max = b.i_max.max(i);
                b.j_min = b.j_min.min(j);
                b.j_max = b.j_max.max(j);
            }
        }
        b
    }

    pub(crate) fn check_grid(&self, grid: &PolarGrid) -> Result<()> {
        grid.check_shape(self.mask.shape(), "segmentation")
    }
}

/// Full sector minus a ring of `margin` cells on every side.
pub fn sector_segmentation(grid: &PolarGrid, margin: usize) -> Result<Segmentation> {
    let (n_r, n_t) = grid.shape();
    if 2 * margin >= n_r.min(n_t) {
        return Err(VfmError::EmptyCavity(format!(
            "margin {margin} leaves no cell on a {n_r}x{n_t} grid"
        )));
    }
    let mask = Array2::from_shape_fn((n_r, n_t), |(i, j)| {
        i >= margin && i < n_r - margin && j >= margin && j < n_t - margin
    });
    Segmentation::new(mask)
}

/// One wall sample of the free-slip condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySample {
    pub grid_index: (usize, usize),
    pub position: (f64, f64),
    /// Unit outward normal in the local `(r_hat, theta_hat)` basis.
    pub normal: [f64; 2],
    pub wall_velocity: [f64; 2],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditionSet {
    pub samples: Vec<BoundarySample>,
}

impl BoundaryConditionSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// Unit vectors toward the four lattice neighbours, in (r_hat, theta_hat).
const NEIGHBOURS: [(isize, isize, [f64; 2]); 4] = [
    (-1, 0, [-1.0, 0.0]),
    (1, 0, [1.0, 0.0]),
    (0, -1, [0.0, -1.0]),
    (0, 1, [0.0, 1.0]),
];

/// True when `(i, j)` is inside and has at least one outside 4-neighbour
/// (cells past the lattice edge count as outside).
pub fn is_edge_cell(seg: &Segmentation, i: usize, j: usize) -> bool {
    seg.contains(i, j)
        && NEIGHBOURS
            .iter()
            .any(|&(di, dj, _)| !seg.contains_signed(i as isize + di, j as isize + dj))
}

/// Collect the cavity edge ring with outward normals.
///
/// The normal of an edge cell is the normalized sum of unit vectors pointing
/// to its outside 4-neighbours. When those cancel (isolated cell, one-cell
/// thick strip) the normal is `+r_hat`. `wall_velocity` is sampled at the
/// cell; `None` means a wall at rest.
pub fn extract_boundary(
    seg: &Segmentation,
    grid: &PolarGrid,
    wall_velocity: Option<&VelocityField>,
) -> Result<BoundaryConditionSet> {
    seg.check_grid(grid)?;
    if let Some(w) = wall_velocity {
        w.check_grid(grid)?;
    }
    let mut samples = Vec::new();
    for (i, j) in seg.cells() {
        let mut n = [0.0f64; 2];
        let mut outside = 0;
        for &(di, dj, u) in &NEIGHBOURS {
            if !seg.contains_signed(i as isize + di, j as isize + dj) {
                n[0] += u[0];
                n[1] += u[1];
                outside += 1;
            }
        }
        if outside == 0 {
            continue;
        }
        let norm = n[0].hypot(n[1]);
        let normal = if norm == 0.0 {
            [1.0, 0.0]
        } else {
            [n[0] / norm, n[1] / norm]
        };
        let wall = wall_velocity
            .map(|w| [w.v_r()[[i, j]], w.v_theta()[[i, j]]])
            .unwrap_or([0.0, 0.0]);
        samples.push(BoundarySample {
            grid_index: (i, j),
            position: grid.position(i, j),
            normal,
            wall_velocity: wall,
        });
    }
    Ok(BoundaryConditionSet { samples })
}

/// Dense numbering of the cavity cells (r-major), shared by the solvers.
#[derive(Clone, Debug, PartialEq)]
pub struct CellIndex {
    cells: Vec<(usize, usize)>,
    lookup: Array2<usize>,
}

impl CellIndex {
    const NONE: usize = usize::MAX;

    pub fn new(seg: &Segmentation) -> Self {
        let cells = seg.cells();
        let mut lookup = Array2::from_elem(seg.shape(), Self::NONE);
        for (k, &ij) in cells.iter().enumerate() {
            lookup[ij] = k;
        }
        Self { cells, lookup }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn get(&self, i: usize, j: usize) -> Option<usize> {
        match self.lookup[[i, j]] {
            Self::NONE => None,
            k => Some(k),
        }
    }

    pub fn get_signed(&self, i: isize, j: isize) -> Option<usize> {
        let (n_r, n_t) = self.lookup.dim();
        if i < 0 || j < 0 || i as usize >= n_r || j as usize >= n_t {
            return None;
        }
        self.get(i as usize, j as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_sized_grid_has_16000_points() {
        let g = PolarGrid::new(200, 80, 0.02, 0.0005, -0.6, 0.015).unwrap();
        assert_eq!(g.len(), 16000);
    }

    #[test]
    fn first_sample_at_lattice_origin() {
        let g = PolarGrid::new(4, 4, 1.0, 1.0, 0.0, 0.1).unwrap();
        assert_eq!(g.position(0, 0), (1.0, 0.0));
        assert_eq!(g.position(3, 2), (4.0, 0.2));
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(PolarGrid::new(4, 4, 0.0, 1.0, 0.0, 0.1).is_err());
        assert!(PolarGrid::new(4, 4, -1.0, 1.0, 0.0, 0.1).is_err());
        assert!(PolarGrid::new(4, 4, 1.0, 0.0, 0.0, 0.1).is_err());
        assert!(PolarGrid::new(4, 4, 1.0, 1.0, 0.0, -0.1).is_err());
        assert!(PolarGrid::new(3, 4, 1.0, 1.0, 0.0, 0.1).is_err());
        assert!(PolarGrid::new(4, 4, 1.0, f64::NAN, 0.0, 0.1).is_err());
    }

    #[test]
    fn sector_margins() {
        let g = PolarGrid::sector(10, 10).unwrap();
        assert_eq!(sector_segmentation(&g, 0).unwrap().count(), 100);
        assert_eq!(sector_segmentation(&g, 2).unwrap().count(), 36);
        let small = PolarGrid::sector(4, 4).unwrap();
        assert!(matches!(
            sector_segmentation(&small, 2),
            Err(VfmError::EmptyCavity(_))
        ));
    }

    #[test]
    fn full_mask_boundary_is_outer_ring() {
        let g = PolarGrid::sector(10, 10).unwrap();
        let seg = Segmentation::full(&g);
        let bc = extract_boundary(&seg, &g, None).unwrap();
        assert_eq!(bc.len(), 36);
    }

    #[test]
    fn rectangular_mask_edge_normals_are_axis_aligned() {
        let g = PolarGrid::sector(12, 16).unwrap();
        let seg = sector_segmentation(&g, 2).unwrap();
        let bc = extract_boundary(&seg, &g, None).unwrap();
        // ring of the 8x12 block
        assert_eq!(bc.len(), 2 * 8 + 2 * 12 - 4);
        for s in &bc.samples {
            let (i, j) = s.grid_index;
            let on_r_edge = i == 2 || i == 9;
            let on_t_edge = j == 2 || j == 13;
            assert!(on_r_edge || on_t_edge);
            match (on_r_edge, on_t_edge) {
                (true, false) => {
                    let sign = if i == 2 { -1.0 } else { 1.0 };
                    assert_eq!(s.normal, [sign, 0.0]);
                }
                (false, true) => {
                    let sign = if j == 2 { -1.0 } else { 1.0 };
                    assert_eq!(s.normal, [0.0, sign]);
                }
                _ => {
                    let h = std::f64::consts::FRAC_1_SQRT_2;
                    assert!((s.normal[0].abs() - h).abs() < 1e-15);
                    assert!((s.normal[1].abs() - h).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn single_cell_uses_tie_break() {
        // All four unit vectors cancel, so the tie-break +r_hat applies.
        let g = PolarGrid::sector(5, 5).unwrap();
        let mut mask = Array2::from_elem((5, 5), false);
        mask[[2, 2]] = true;
        let seg = Segmentation::new(mask).unwrap();
        let bc = extract_boundary(&seg, &g, None).unwrap();
        assert_eq!(bc.len(), 1);
        assert_eq!(bc.samples[0].normal, [1.0, 0.0]);
        assert_eq!(bc.samples[0].grid_index, (2, 2));
    }

    #[test]
    fn wall_velocity_is_sampled() {
        let g = PolarGrid::sector(6, 6).unwrap();
        let seg = Segmentation::full(&g);
        let mut w = VelocityField::zeros(&g);
        w.v_r_mut()[[0, 3]] = 0.25;
        let bc = extract_boundary(&seg, &g, Some(&w)).unwrap();
        let s = bc.samples.iter().find(|s| s.grid_index == (0, 3)).unwrap();
        assert_eq!(s.wall_velocity, [0.25, 0.0]);
    }

    #[test]
    fn grid_serde_validates() {
        let bad = r#"{"n_r":4,"n_theta":4,"r0":0.0,"dr":1.0,"theta0":0.0,"dtheta":0.1}"#;
        assert!(serde_json::from_str::<PolarGrid>(bad).is_err());
        let g = PolarGrid::sector(8, 9).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<PolarGrid>(&s).unwrap(), g);
    }
}
