//! The four PINN loss terms assembled on a differentiation tape.
//!
//! Network inputs are cavity-box coordinates mapped to `[-1, 1]`; outputs
//! are velocities divided by the frame's velocity scale. Every loss is
//! expressed in those output units, with physical derivatives recovered
//! through the chain factors `2 / L_r` and `2 / L_theta`.

use std::sync::Arc;

use ndarray::Array2;

use crate::autodiff::{MlpGraph, MlpParams, NodeId, Normalization, Tape};
use crate::error::{Result, VfmError};
use crate::field::VelocityField;
use crate::grid::{BoundaryConditionSet, CellIndex, PolarGrid, Segmentation};
use crate::phantom::{CavityBox, DopplerFrame, StreamFunctionSpec};
use crate::physics::{smoothing_operator, HuberConfig, LossBreakdown};
use crate::sparse::{CsrBuilder, CsrMatrix};

/// Everything about a frame that stays fixed while a network is fitted.
#[derive(Clone, Debug)]
pub struct PinnContext {
    grid: PolarGrid,
    seg: Segmentation,
    index: CellIndex,
    norm: Normalization,
    points: Array2<f64>,
    radial_chain: Arc<Vec<f64>>,
    angular_chain: f64,
    data_select: Arc<CsrMatrix>,
    data_target: Arc<Array2<f64>>,
    data_weight: Arc<Vec<f64>>,
    wall_r: Arc<CsrMatrix>,
    wall_theta: Arc<CsrMatrix>,
    wall_target: Arc<Array2<f64>>,
    smooth: Arc<CsrMatrix>,
    huber: HuberConfig,
}

/// Tape handles of the loss terms and raw residual columns.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub l1: NodeId,
    pub l2: NodeId,
    pub l3: NodeId,
    pub l4: NodeId,
    /// Mass-conservation residual per cavity cell (N x 1).
    pub c1: NodeId,
    /// Wall residual per boundary sample (B x 1).
    pub c2: NodeId,
}

impl PinnContext {
    pub fn new(frame: &DopplerFrame, bc: &BoundaryConditionSet, huber: HuberConfig) -> Result<Self> {
        let grid = *frame.grid();
        let seg = frame.seg().clone();
        let index = CellIndex::new(&seg);
        if index.is_empty() {
            return Err(VfmError::EmptyCavity("no cavity cells".into()));
        }
        let bx = CavityBox::of(&seg, &grid)?;
        let vmax = frame.max_abs_velocity();
        let norm = Normalization {
            r_min: bx.r_a,
            r_max: bx.r_b,
            theta_min: bx.theta_a,
            theta_max: bx.theta_b,
            vel_scale: if vmax > 0.0 { vmax } else { 1.0 },
        };
        let v = norm.vel_scale;
        let n = index.len();
        let mut points = Array2::zeros((n, 2));
        let mut radial_chain = Vec::with_capacity(n);
        let cr = 2.0 / (norm.r_max - norm.r_min);
        for (k, &(i, j)) in index.cells().iter().enumerate() {
            let (r, t) = (grid.radius(i), grid.angle(j));
            points[[k, 0]] = cr * (r - norm.r_min) - 1.0;
            points[[k, 1]] = 2.0 * (t - norm.theta_min) / (norm.theta_max - norm.theta_min) - 1.0;
            radial_chain.push(r * cr);
        }

        let mut select = CsrBuilder::new(n);
        let mut target = Vec::new();
        let mut weight = Vec::new();
        for (k, &(i, j)) in index.cells().iter().enumerate() {
            if frame.valid()[[i, j]] {
                select.push_row(&[(k, 1.0)]);
                target.push(frame.v_d()[[i, j]] / v);
                weight.push(frame.weights()[[i, j]]);
            }
        }
        if target.is_empty() {
            return Err(VfmError::InvalidArgument("frame has no valid samples in the cavity".into()));
        }

        let mut wall_r = CsrBuilder::new(n);
        let mut wall_t = CsrBuilder::new(n);
        let mut wall_target = Vec::with_capacity(bc.len());
        for s in &bc.samples {
            let (i, j) = s.grid_index;
            let k = index.get(i, j).ok_or_else(|| {
                VfmError::ShapeMismatch(format!("boundary sample at ({i},{j}) lies outside the cavity"))
            })?;
            wall_r.push_row(&[(k, s.normal[0])]);
            wall_t.push_row(&[(k, s.normal[1])]);
            wall_target.push((s.wall_velocity[0] * s.normal[0] + s.wall_velocity[1] * s.normal[1]) / v);
        }
        let nb = wall_target.len();
        let smooth = smoothing_operator(&grid, &seg, &index);
        Ok(Self {
            angular_chain: 2.0 / (norm.theta_max - norm.theta_min),
            grid,
            seg,
            index,
            norm,
            points,
            radial_chain: Arc::new(radial_chain),
            data_select: Arc::new(select.finish()),
            data_target: Arc::new(Array2::from_shape_vec((target.len(), 1), target).expect("column")),
            data_weight: Arc::new(weight),
            wall_r: Arc::new(wall_r.finish()),
            wall_theta: Arc::new(wall_t.finish()),
            wall_target: Arc::new(Array2::from_shape_vec((nb, 1), wall_target).expect("column")),
            smooth: Arc::new(smooth),
            huber,
        })
    }

    pub fn grid(&self) -> &PolarGrid {
        &self.grid
    }
    pub fn seg(&self) -> &Segmentation {
        &self.seg
    }
    pub fn index(&self) -> &CellIndex {
        &self.index
    }
    pub fn normalization(&self) -> Normalization {
        self.norm
    }
    /// Normalized coordinates of the cavity cells (N x 2).
    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }
    pub fn n_cells(&self) -> usize {
        self.index.len()
    }
    pub fn n_boundary(&self) -> usize {
        self.wall_target.nrows()
    }
    pub fn n_data(&self) -> usize {
        self.data_target.nrows()
    }

    /// Record the losses for network outputs `y` (N x 2) and input tangents
    /// `tangent` (2N x 2, derivatives w.r.t. the normalized inputs).
    pub fn assemble(&self, tape: &mut Tape, y: NodeId, tangent: NodeId) -> LossNodes {
        let n = self.n_cells();
        let ur = tape.column(y, 0);
        let ut = tape.column(y, 1);

        let sel = tape.sparse(ur, self.data_select.clone());
        let target = tape.constant(self.data_target.as_ref().clone());
        let diff = tape.sub(sel, target);
        let hub = tape.huber(diff, self.huber);
        let weighted = tape.scale_rows(hub, self.data_weight.clone());
        let l1 = tape.sum(weighted);

        let d_r = tape.row_slice(tangent, 0, n);
        let d_t = tape.row_slice(tangent, n, n);
        let dur = tape.column(d_r, 0);
        let dut = tape.column(d_t, 1);
        let radial = tape.scale_rows(dur, self.radial_chain.clone());
        let angular = tape.scale(dut, self.angular_chain);
        let s = tape.add(radial, ur);
        let c1 = tape.add(s, angular);
        let h1 = tape.huber(c1, self.huber);
        let l2 = tape.sum(h1);

        let wr = tape.sparse(ur, self.wall_r.clone());
        let wt = tape.sparse(ut, self.wall_theta.clone());
        let vn = tape.add(wr, wt);
        let wall = tape.constant(self.wall_target.as_ref().clone());
        let c2 = tape.sub(vn, wall);
        let h2 = tape.huber(c2, self.huber);
        let l3 = tape.sum(h2);

        let sr = tape.sparse(ur, self.smooth.clone());
        let st = tape.sparse(ut, self.smooth.clone());
        let er = tape.sum_squares(sr);
        let et = tape.sum_squares(st);
        let l4 = tape.weighted_sum(&[(er, 1.0), (et, 1.0)]);
        LossNodes { l1, l2, l3, l4, c1, c2 }
    }

    /// Evaluate the network on the cavity and record its losses.
    pub fn forward(&self, params: &MlpParams) -> Result<PinnForward> {
        let mut tape = Tape::new();
        let graph = params.build_graph(&mut tape, &self.points, true)?;
        let nodes = self.assemble(&mut tape, graph.output, graph.tangent.expect("tangent requested"));
        Ok(PinnForward::new(tape, Some(graph), nodes))
    }

    /// Losses of a known velocity field, fed in place of the network. The
    /// field's radial r-derivative and angular theta-derivative are given in
    /// physical units; the other two Jacobian entries do not enter any loss.
    pub fn forward_known(
        &self,
        field: &VelocityField,
        dvr_dr: &Array2<f64>,
        dvtheta_dtheta: &Array2<f64>,
    ) -> Result<PinnForward> {
        field.check_grid(&self.grid)?;
        let n = self.n_cells();
        let v = self.norm.vel_scale;
        let mut y = Array2::zeros((n, 2));
        let mut t = Array2::zeros((2 * n, 2));
        let cr = 2.0 / (self.norm.r_max - self.norm.r_min);
        for (k, &(i, j)) in self.index.cells().iter().enumerate() {
            y[[k, 0]] = field.v_r()[[i, j]] / v;
            y[[k, 1]] = field.v_theta()[[i, j]] / v;
            t[[k, 0]] = dvr_dr[[i, j]] / (v * cr);
            t[[n + k, 1]] = dvtheta_dtheta[[i, j]] / (v * self.angular_chain);
        }
        let mut tape = Tape::new();
        let yi = tape.constant(y);
        let ti = tape.constant(t);
        let nodes = self.assemble(&mut tape, yi, ti);
        Ok(PinnForward::new(tape, None, nodes))
    }

    /// Convenience wrapper for [`forward_known`](Self::forward_known) with an
    /// analytic stream-function flow.
    pub fn forward_stream_function(&self, spec: &StreamFunctionSpec) -> Result<PinnForward> {
        let bx = CavityBox::of(&self.seg, &self.grid)?;
        let shape = self.grid.shape();
        let mut vr = Array2::zeros(shape);
        let mut vt = Array2::zeros(shape);
        let mut drr = Array2::zeros(shape);
        let mut dtt = Array2::zeros(shape);
        for &(i, j) in self.index.cells() {
            let s = spec.sample(&bx, self.grid.radius(i), self.grid.angle(j));
            vr[[i, j]] = s.v_r;
            vt[[i, j]] = s.v_theta;
            drr[[i, j]] = s.dvr_dr;
            dtt[[i, j]] = s.dvtheta_dtheta;
        }
        self.forward_known(&VelocityField::new(vr, vt)?, &drr, &dtt)
    }

    /// Physical velocity field from network outputs on the cavity cells.
    pub fn field_from_outputs(&self, y: &Array2<f64>) -> Result<VelocityField> {
        let mut f = VelocityField::zeros(&self.grid);
        let v = self.norm.vel_scale;
        for (k, &(i, j)) in self.index.cells().iter().enumerate() {
            f.v_r_mut()[[i, j]] = v * y[[k, 0]];
            f.v_theta_mut()[[i, j]] = v * y[[k, 1]];
        }
        Ok(f)
    }

    pub fn predict(&self, params: &MlpParams) -> Result<VelocityField> {
        let y = params.forward(&self.points)?;
        self.field_from_outputs(&y)
    }
}

/// Loss weights applied when differentiating a recorded evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Weighting<'a> {
    /// `mu_1 L1 + mu_2 L2 + mu_3 L3 + mu4 L4`
    Balanced { mu: [f64; 3], mu4: f64 },
    /// `L1 + <lambda1, C1> + <lambda2, C2> + 0.5 mu (L2 + L3) + mu4 L4`
    Augmented {
        lambda1: &'a [f64],
        lambda2: &'a [f64],
        mu: f64,
        mu4: f64,
    },
}

/// One recorded evaluation: loss values, residuals, and the tape to
/// differentiate them.
pub struct PinnForward {
    tape: Tape,
    graph: Option<MlpGraph>,
    pub nodes: LossNodes,
    pub losses: LossBreakdown,
}

fn column_to_vec(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

impl PinnForward {
    fn new(tape: Tape, graph: Option<MlpGraph>, nodes: LossNodes) -> Self {
        let losses = LossBreakdown {
            l1: tape.scalar(nodes.l1),
            l2: tape.scalar(nodes.l2),
            l3: tape.scalar(nodes.l3),
            l4: tape.scalar(nodes.l4),
        };
        Self {
            tape,
            graph,
            nodes,
            losses,
        }
    }

    pub fn c1(&self) -> Vec<f64> {
        column_to_vec(self.tape.value(self.nodes.c1))
    }

    pub fn c2(&self) -> Vec<f64> {
        column_to_vec(self.tape.value(self.nodes.c2))
    }

    /// Network outputs on the cavity cells (normalized units), if a network
    /// produced this evaluation.
    pub fn outputs(&self) -> Option<&Array2<f64>> {
        self.graph.as_ref().map(|g| self.tape.value(g.output))
    }

    /// Weighted total of this evaluation.
    pub fn total(&self, w: &Weighting) -> Result<f64> {
        let l = &self.losses;
        Ok(match *w {
            Weighting::Balanced { mu, mu4 } => mu[0] * l.l1 + mu[1] * l.l2 + mu[2] * l.l3 + mu4 * l.l4,
            Weighting::Augmented {
                lambda1,
                lambda2,
                mu,
                mu4,
            } => {
                let c1 = self.tape.value(self.nodes.c1);
                let c2 = self.tape.value(self.nodes.c2);
                if lambda1.len() != c1.len() || lambda2.len() != c2.len() {
                    return Err(VfmError::ShapeMismatch("multiplier lengths differ from residuals".into()));
                }
                let ip1: f64 = lambda1.iter().zip(c1.iter()).map(|(a, b)| a * b).sum();
                let ip2: f64 = lambda2.iter().zip(c2.iter()).map(|(a, b)| a * b).sum();
                l.l1 + ip1 + ip2 + 0.5 * mu * (l.l2 + l.l3) + mu4 * l.l4
            }
        })
    }

    /// Weighted total and its gradient over the flat network parameters.
    pub fn gradient(&self, params: &MlpParams, w: &Weighting) -> Result<(f64, Vec<f64>)> {
        let graph = self
            .graph
            .as_ref()
            .ok_or_else(|| VfmError::InvalidArgument("evaluation has no network parameters".into()))?;
        let total = self.total(w)?;
        let scalar = |x: f64| Array2::from_elem((1, 1), x);
        let n = &self.nodes;
        let seeds = match *w {
            Weighting::Balanced { mu, mu4 } => vec![
                (n.l1, scalar(mu[0])),
                (n.l2, scalar(mu[1])),
                (n.l3, scalar(mu[2])),
                (n.l4, scalar(mu4)),
            ],
            Weighting::Augmented {
                lambda1,
                lambda2,
                mu,
                mu4,
            } => vec![
                (n.l1, scalar(1.0)),
                (n.c1, Array2::from_shape_vec((lambda1.len(), 1), lambda1.to_vec()).expect("column")),
                (n.c2, Array2::from_shape_vec((lambda2.len(), 1), lambda2.to_vec()).expect("column")),
                (n.l2, scalar(0.5 * mu)),
                (n.l3, scalar(0.5 * mu)),
                (n.l4, scalar(mu4)),
            ],
        };
        let grads = self.tape.backward(&seeds)?;
        Ok((total, params.flat_gradient(&grads, graph)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::LAYER_SIZES;
    use crate::grid::{extract_boundary, sector_segmentation};
    use crate::phantom::{stream_function_field, synthesize_doppler};
    use crate::physics::huber;

    fn setup(v: f64) -> (DopplerFrame, BoundaryConditionSet) {
        let grid = PolarGrid::sector(10, 16).unwrap();
        let seg = sector_segmentation(&grid, 1).unwrap();
        let shape = grid.shape();
        let frame = DopplerFrame::new(
            grid,
            seg.clone(),
            Array2::from_elem(shape, v),
            Array2::from_elem(shape, 1.0),
            seg.mask().clone(),
        )
        .unwrap();
        let bc = extract_boundary(&seg, &grid, None).unwrap();
        (frame, bc)
    }

    #[test]
    fn zero_network_on_zero_data_has_zero_losses() {
        let (frame, bc) = setup(0.0);
        let ctx = PinnContext::new(&frame, &bc, HuberConfig::default()).unwrap();
        let fwd = ctx.forward(&MlpParams::zeros(&LAYER_SIZES).unwrap()).unwrap();
        assert_eq!(fwd.losses.as_array(), [0.0; 4]);
    }

    #[test]
    fn zero_network_against_constant_data() {
        let c = 0.37;
        let (frame, bc) = setup(c);
        let ctx = PinnContext::new(&frame, &bc, HuberConfig::default()).unwrap();
        let fwd = ctx.forward(&MlpParams::zeros(&LAYER_SIZES).unwrap()).unwrap();
        // Residuals are measured in units of the frame's largest |v_D|.
        let scale = ctx.normalization().vel_scale;
        assert_eq!(scale, c);
        let expected = ctx.n_data() as f64 * huber(c / scale, HuberConfig::default());
        assert!((fwd.losses.l1 - expected).abs() < 1e-12 * expected);
        assert_eq!(fwd.losses.l2, 0.0);
    }

    #[test]
    fn analytic_flow_satisfies_both_constraints() {
        let grid = PolarGrid::sector(20, 40).unwrap();
        let seg = sector_segmentation(&grid, 2).unwrap();
        let spec = StreamFunctionSpec::single_vortex(0.01);
        let truth = stream_function_field(&spec, &grid, &seg).unwrap();
        let frame = synthesize_doppler(&truth, &grid, &seg, f64::INFINITY, 0).unwrap();
        let bc = extract_boundary(&seg, &grid, None).unwrap();
        let ctx = PinnContext::new(&frame, &bc, HuberConfig::default()).unwrap();
        let fwd = ctx.forward_stream_function(&spec).unwrap();
        assert!(fwd.losses.l2 < 1e-26, "L2 = {}", fwd.losses.l2);
        assert!(fwd.losses.l3 < 1e-26, "L3 = {}", fwd.losses.l3);
        assert!(fwd.losses.l1 < 1e-26);
        assert!(fwd.c1().iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn prediction_matches_recorded_outputs() {
        let (frame, bc) = setup(0.2);
        let ctx = PinnContext::new(&frame, &bc, HuberConfig::default()).unwrap();
        let p = MlpParams::init(3);
        let fwd = ctx.forward(&p).unwrap();
        let a = ctx.field_from_outputs(fwd.outputs().unwrap()).unwrap();
        assert_eq!(a, ctx.predict(&p).unwrap());
    }

    #[test]
    fn augmented_gradient_matches_finite_differences() {
        let (frame, bc) = setup(0.2);
        let ctx = PinnContext::new(&frame, &bc, HuberConfig::default()).unwrap();
        let p = MlpParams::init(5);
        let l1: Vec<f64> = (0..ctx.n_cells()).map(|k| 0.01 * (k as f64).sin()).collect();
        let l2: Vec<f64> = (0..ctx.n_boundary()).map(|k| -0.02 * (k as f64).cos()).collect();
        let w = Weighting::Augmented {
            lambda1: &l1,
            lambda2: &l2,
            mu: 2.5,
            mu4: 1e-3,
        };
        let (total, g) = ctx.forward(&p).unwrap().gradient(&p, &w).unwrap();
        let x = p.to_flat();
        let h = 1e-6;
        for k in [0, 17, 600, 9000, x.len() - 1] {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fp = ctx.forward(&MlpParams::from_flat(&LAYER_SIZES, &xp).unwrap()).unwrap().total(&w).unwrap();
            let fm = ctx.forward(&MlpParams::from_flat(&LAYER_SIZES, &xm).unwrap()).unwrap().total(&w).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-7 + 1e-5 * fd.abs(), "param {k}: {} vs {fd}", g[k]);
        }
        assert!(total.is_finite());
    }
}
