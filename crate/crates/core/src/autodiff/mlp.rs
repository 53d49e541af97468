//! Fully connected tanh network mapping (r, theta) to (v_r, v_theta).
//!
//! Weights use the (out x in) layout; the flat parameter vector lists each
//! layer's weight matrix row-major followed by its bias.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, NodeId, Tape};
use crate::error::{Result, VfmError};

/// 2 inputs, six hidden layers of 60 units, 2 outputs.
pub const LAYER_SIZES: [usize; 8] = [2, 60, 60, 60, 60, 60, 60, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
}

/// Network outputs with their derivatives with respect to the inputs.
#[derive(Clone, Debug)]
pub struct EvalBatch {
    /// N x 2
    pub outputs: Array2<f64>,
    /// N x 2 x 2, entry `[n, a, b]` is d out_a / d in_b.
    pub input_jacobian: Array3<f64>,
}

/// Handles into a tape holding one network evaluation.
#[derive(Clone, Debug)]
pub struct MlpGraph {
    /// Weight then bias node for each layer.
    pub params: Vec<NodeId>,
    /// N x 2 outputs.
    pub output: NodeId,
    /// 2N x 2: rows `0..N` are d out / d in_0, rows `N..2N` are d out / d in_1.
    pub tangent: Option<NodeId>,
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(VfmError::InvalidArgument(format!("bad layer sizes {sizes:?}")));
    }
    Ok(())
}

impl MlpParams {
    /// Standard architecture with Xavier-uniform weights and zero biases.
    pub fn init(seed: u64) -> Self {
        Self::init_with(&LAYER_SIZES, seed).expect("standard sizes are valid")
    }

    pub fn init_with(sizes: &[usize], seed: u64) -> Result<Self> {
        check_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.gen_range(-bound..bound));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(VfmError::InvalidArgument("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].weight.nrows() != pair[1].weight.ncols() {
                return Err(VfmError::ShapeMismatch("consecutive layers do not chain".into()));
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.nrows() {
                return Err(VfmError::ShapeMismatch("bias length differs from layer width".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weight.ncols()];
        s.extend(self.layers.iter().map(|l| l.weight.nrows()));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(VfmError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = flat[k];
                k += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    pub fn from_flat(sizes: &[usize], flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(sizes)?;
        p.set_flat(flat)?;
        Ok(p)
    }

    fn check_input(&self, points: &Array2<f64>) -> Result<()> {
        if points.iter().any(|v| !v.is_finite()) {
            return Err(VfmError::NonFinite("network input".into()));
        }
        let n_in = self.layers[0].weight.ncols();
        if points.ncols() != n_in {
            return Err(VfmError::ShapeMismatch(format!(
                "network takes {n_in} inputs, points have {} columns",
                points.ncols()
            )));
        }
        Ok(())
    }

    /// Record one evaluation on `tape`. With `with_tangent`, the derivatives
    /// with respect to both inputs are carried forward next to the
    /// activations as a stacked `2N x width` tangent block. The primal path
    /// is the same sequence of operations either way.
    pub fn build_graph(&self, tape: &mut Tape, points: &Array2<f64>, with_tangent: bool) -> Result<MlpGraph> {
        self.check_input(points)?;
        if with_tangent && points.ncols() != 2 {
            return Err(VfmError::InvalidArgument("tangents are built for two inputs".into()));
        }
        let n = points.nrows();
        let mut h = tape.constant(points.clone());
        let mut t = if with_tangent {
            let mut t0 = Array2::zeros((2 * n, 2));
            t0.slice_mut(ndarray::s![..n, 0]).fill(1.0);
            t0.slice_mut(ndarray::s![n.., 1]).fill(1.0);
            Some(tape.constant(t0))
        } else {
            None
        };
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = tape.variable(layer.weight.clone());
            let b = tape.variable(layer.bias.clone().insert_axis(Axis(0)));
            params.push(w);
            params.push(b);
            let zp = tape.matmul_t(h, w);
            let pre = tape.add_row_bias(zp, b);
            let zt = t.map(|t| tape.matmul_t(t, w));
            if k == last {
                h = pre;
                t = zt;
            } else {
                h = tape.tanh(pre);
                t = match zt {
                    Some(zt) => {
                        let d = tape.one_minus_square(h);
                        Some(tape.mul_tiled(zt, d))
                    }
                    None => None,
                };
            }
        }
        Ok(MlpGraph {
            params,
            output: h,
            tangent: t,
        })
    }

    /// Flatten the parameter adjoints of `graph` in [`MlpParams::to_flat`] order.
    pub fn flat_gradient(&self, grads: &Gradients, graph: &MlpGraph) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (k, l) in self.layers.iter().enumerate() {
            match grads.get(graph.params[2 * k]) {
                Some(g) => out.extend(g.iter()),
                None => out.extend(std::iter::repeat_n(0.0, l.weight.len())),
            }
            match grads.get(graph.params[2 * k + 1]) {
                Some(g) => out.extend(g.iter()),
                None => out.extend(std::iter::repeat_n(0.0, l.bias.len())),
            }
        }
        out
    }

    pub fn forward(&self, points: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let g = self.build_graph(&mut tape, points, false)?;
        Ok(tape.value(g.output).clone())
    }

    pub fn forward_with_input_jacobian(&self, points: &Array2<f64>) -> Result<EvalBatch> {
        let mut tape = Tape::new();
        let g = self.build_graph(&mut tape, points, true)?;
        let n = points.nrows();
        let out = tape.value(g.output).clone();
        let t = tape.value(g.tangent.expect("tangent requested"));
        let n_out = out.ncols();
        let mut jac = Array3::zeros((n, n_out, 2));
        for i in 0..n {
            for a in 0..n_out {
                jac[[i, a, 0]] = t[[i, a]];
                jac[[i, a, 1]] = t[[n + i, a]];
            }
        }
        Ok(EvalBatch {
            outputs: out,
            input_jacobian: jac,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn standard_network_has_18602_parameters() {
        let p = MlpParams::init(0);
        assert_eq!(p.param_count(), 18602);
        assert_eq!(p.to_flat().len(), 18602);
        assert_eq!(p.layer_sizes(), LAYER_SIZES.to_vec());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = MlpParams::init(5);
        assert_eq!(a, MlpParams::init(5));
        assert_ne!(a, MlpParams::init(6));
        let bound = (6.0f64 / 62.0).sqrt();
        assert!(a.layers()[0].weight.iter().all(|w| w.abs() <= bound));
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn flat_round_trip() {
        let a = MlpParams::init(1);
        let b = MlpParams::from_flat(&LAYER_SIZES, &a.to_flat()).unwrap();
        assert_eq!(a, b);
        let mut c = a.clone();
        assert!(c.set_flat(&[0.0; 3]).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&LAYER_SIZES).unwrap();
        let y = p.forward(&array![[0.1, 0.2], [-0.3, 0.9]]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_network_matches_hand_computation() {
        let layers = vec![
            Dense {
                weight: array![[0.5, -1.0]],
                bias: array![0.1],
            },
            Dense {
                weight: array![[2.0], [-3.0]],
                bias: array![0.0, 1.0],
            },
        ];
        let p = MlpParams::from_layers(layers).unwrap();
        let x = array![[0.4, 0.2]];
        let e = p.forward_with_input_jacobian(&x).unwrap();
        let h = (0.5f64 * 0.4 - 0.2 + 0.1).tanh();
        assert!((e.outputs[[0, 0]] - 2.0 * h).abs() < 1e-15);
        assert!((e.outputs[[0, 1]] - (1.0 - 3.0 * h)).abs() < 1e-15);
        let d = 1.0 - h * h;
        assert!((e.input_jacobian[[0, 0, 0]] - 2.0 * d * 0.5).abs() < 1e-15);
        assert!((e.input_jacobian[[0, 1, 1]] - -(-3.0 * d)).abs() < 1e-15);
    }

    #[test]
    fn wrong_input_width_rejected() {
        let p = MlpParams::init(0);
        assert!(p.forward(&Array2::zeros((3, 3))).is_err());
    }
    fn random_points(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, 2), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn jacobian_path_leaves_predictions_bit_identical() {
        let p = MlpParams::init(11);
        let x = random_points(257, 1);
        let plain = p.forward(&x).unwrap();
        let with_j = p.forward_with_input_jacobian(&x).unwrap();
        assert_eq!(plain, with_j.outputs);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let p = MlpParams::init(4);
        let x = random_points(100, 2);
        let e = p.forward_with_input_jacobian(&x).unwrap();
        let h = 1e-5;
        for b in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.column_mut(b).mapv_inplace(|v| v + h);
            xm.column_mut(b).mapv_inplace(|v| v - h);
            let fd = (p.forward(&xp).unwrap() - p.forward(&xm).unwrap()) / (2.0 * h);
            for i in 0..100 {
                for a in 0..2 {
                    let j = e.input_jacobian[[i, a, b]];
                    let rel = (j - fd[[i, a]]).abs() / fd[[i, a]].abs().max(1e-3);
                    assert!(rel < 1e-5, "point {i} entry ({a},{b}): {j} vs {}", fd[[i, a]]);
                }
            }
        }
    }

    #[test]
    fn tiny_weights_give_product_of_matrices() {
        let mut p = MlpParams::init(8);
        let flat: Vec<f64> = p.to_flat().iter().map(|v| v * 1e-6).collect();
        p.set_flat(&flat).unwrap();
        let mut prod = p.layers()[0].weight.clone();
        for l in &p.layers()[1..] {
            prod = l.weight.dot(&prod);
        }
        let e = p.forward_with_input_jacobian(&random_points(10, 3)).unwrap();
        let scale = prod.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..10 {
            for a in 0..2 {
                for b in 0..2 {
                    let d = (e.input_jacobian[[i, a, b]] - prod[[a, b]]).abs();
                    assert!(d <= 1e-8 * scale.max(f64::MIN_POSITIVE), "{d} vs scale {scale}");
                }
            }
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = MlpParams::init(0);
        assert!(p.forward(&array![[f64::NAN, 0.0]]).is_err());
    }
}
