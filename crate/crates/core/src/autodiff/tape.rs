//! Reverse-mode differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records every operation eagerly: building a node computes its
//! value immediately. [`Tape::backward`] then walks the record in reverse and
//! accumulates adjoints. A tape is single-use and owned by one thread.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Result, VfmError};
use crate::linalg::{matmul_nn, matmul_nt, matmul_tn};
use crate::physics::{huber, huber_grad, HuberConfig};
use crate::sparse::CsrMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `a * w^T`
    MatMulT(NodeId, NodeId),
    /// `a + 1 b` with `b` a single row
    AddRowBias(NodeId, NodeId),
    Tanh(NodeId),
    /// `1 - a^2`
    OneMinusSquare(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a` is `k` stacked blocks, each multiplied elementwise by `d`.
    MulTiled(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleRows(NodeId, Arc<Vec<f64>>),
    RowSlice(NodeId, usize, usize),
    VStack(Vec<NodeId>),
    Column(NodeId, usize),
    Sparse(NodeId, Arc<CsrMatrix>),
    Huber(NodeId, HuberConfig),
    Sum(NodeId),
    SumSquares(NodeId),
    Dot(NodeId, Arc<Array2<f64>>),
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node after a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` when the node does not influence the seeds.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn variable(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, w: NodeId) -> NodeId {
        let v = matmul_nt(self.value(a).view(), self.value(w).view());
        let rg = self.needs(a) || self.needs(w);
        self.push(v, Op::MatMulT(a, w), rg)
    }

    pub fn add_row_bias(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bias = self.value(b);
        assert_eq!(bias.nrows(), 1, "bias must be a single row");
        let v = self.value(a) + bias;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::AddRowBias(a, b), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.needs(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn one_minus_square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 - x * x);
        let rg = self.needs(a);
        self.push(v, Op::OneMinusSquare(a), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn mul_tiled(&mut self, a: NodeId, d: NodeId) -> NodeId {
        let (av, dv) = (self.value(a), self.value(d));
        let n = dv.nrows();
        assert!(n > 0 && av.nrows() % n == 0 && av.ncols() == dv.ncols());
        let mut v = av.clone();
        for mut block in v.axis_chunks_iter_mut(Axis(0), n) {
            block *= dv;
        }
        let rg = self.needs(a) || self.needs(d);
        self.push(v, Op::MulTiled(a, d), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        let rg = self.needs(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Multiply row `i` by `s[i]`.
    pub fn scale_rows(&mut self, a: NodeId, s: Arc<Vec<f64>>) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.nrows(), s.len());
        let mut v = av.clone();
        for (mut row, &f) in v.axis_iter_mut(Axis(0)).zip(s.iter()) {
            row *= f;
        }
        let rg = self.needs(a);
        self.push(v, Op::ScaleRows(a, s), rg)
    }

    pub fn row_slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.needs(a);
        self.push(v, Op::RowSlice(a, start, len), rg)
    }

    pub fn vstack(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("vstack: column mismatch");
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::VStack(parts.to_vec()), rg)
    }

    pub fn column(&mut self, a: NodeId, col: usize) -> NodeId {
        let v = self.value(a).slice(s![.., col..col + 1]).to_owned();
        let rg = self.needs(a);
        self.push(v, Op::Column(a, col), rg)
    }

    /// `m * a` for a constant sparse `m`.
    pub fn sparse(&mut self, a: NodeId, m: Arc<CsrMatrix>) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.nrows(), m.cols(), "sparse operator column mismatch");
        let mut v = Array2::zeros((m.rows(), av.ncols()));
        for r in 0..m.rows() {
            for (c, w) in m.row(r) {
                let src = av.row(c);
                let mut dst = v.row_mut(r);
                dst.scaled_add(w, &src);
            }
        }
        let rg = self.needs(a);
        self.push(v, Op::Sparse(a, m), rg)
    }

    /// Elementwise Huber penalty.
    pub fn huber(&mut self, a: NodeId, cfg: HuberConfig) -> NodeId {
        let v = self.value(a).mapv(|x| huber(x, cfg));
        let rg = self.needs(a);
        self.push(v, Op::Huber(a, cfg), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.needs(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).iter().map(|x| x * x).sum();
        let rg = self.needs(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumSquares(a), rg)
    }

    /// `sum(a .* c)` for a constant `c`.
    pub fn dot_const(&mut self, a: NodeId, c: Arc<Array2<f64>>) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.dim(), c.dim());
        let s: f64 = av.iter().zip(c.iter()).map(|(x, y)| x * y).sum();
        let rg = self.needs(a);
        self.push(Array2::from_elem((1, 1), s), Op::Dot(a, c), rg)
    }

    /// `sum_k w_k x_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let s: f64 = terms.iter().map(|&(id, w)| w * self.scalar(id)).sum();
        let rg = terms.iter().any(|&(id, _)| self.needs(id));
        self.push(Array2::from_elem((1, 1), s), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Reverse sweep from several seeded nodes; each seed has the shape of
    /// its node and acts as that node's incoming adjoint.
    pub fn backward(&self, seeds: &[(NodeId, Array2<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (id, seed) in seeds {
            if seed.dim() != self.value(*id).dim() {
                return Err(VfmError::ShapeMismatch(format!(
                    "seed {:?} for node of shape {:?}",
                    seed.dim(),
                    self.value(*id).dim()
                )));
            }
            accumulate(&mut grads[id.0], seed.clone());
            top = top.max(id.0 + 1);
        }
        for k in (0..top).rev() {
            let node = &self.nodes[k];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[k].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMulT(a, w) => {
                if self.needs(*w) {
                    accumulate(&mut grads[w.0], matmul_tn(g.view(), self.value(*a).view()));
                }
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], matmul_nn(g.view(), self.value(*w).view()));
                }
            }
            Op::AddRowBias(a, b) => {
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|x, &y| *x *= 1.0 - y * y);
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::OneMinusSquare(a) => {
                if self.needs(*a) {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|x, &y| *x *= -2.0 * y);
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) && self.needs(*b) {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                } else if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                } else if self.needs(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], -&g);
                }
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], &g * self.value(*b));
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], &g * self.value(*a));
                }
            }
            Op::MulTiled(a, d) => {
                let dv = self.value(*d);
                let n = dv.nrows();
                if self.needs(*d) {
                    let av = self.value(*a);
                    let mut gd = Array2::zeros(dv.dim());
                    for (gb, ab) in g.axis_chunks_iter(Axis(0), n).zip(av.axis_chunks_iter(Axis(0), n)) {
                        Zip::from(&mut gd).and(&gb).and(&ab).for_each(|o, &x, &y| *o += x * y);
                    }
                    accumulate(&mut grads[d.0], gd);
                }
                if self.needs(*a) {
                    let mut ga = g;
                    for mut block in ga.axis_chunks_iter_mut(Axis(0), n) {
                        block *= dv;
                    }
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g * *c);
                }
            }
            Op::ScaleRows(a, s) => {
                if self.needs(*a) {
                    let mut ga = g;
                    for (mut row, &f) in ga.axis_iter_mut(Axis(0)).zip(s.iter()) {
                        row *= f;
                    }
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::RowSlice(a, start, len) => {
                if self.needs(*a) {
                    let slot = &mut grads[a.0];
                    let target = slot.get_or_insert_with(|| Array2::zeros(self.value(*a).dim()));
                    let mut view = target.slice_mut(s![*start..*start + *len, ..]);
                    view += &g;
                }
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).nrows();
                    if self.needs(*p) {
                        accumulate(&mut grads[p.0], g.slice(s![offset..offset + rows, ..]).to_owned());
                    }
                    offset += rows;
                }
            }
            Op::Column(a, col) => {
                if self.needs(*a) {
                    let slot = &mut grads[a.0];
                    let target = slot.get_or_insert_with(|| Array2::zeros(self.value(*a).dim()));
                    let mut view = target.slice_mut(s![.., *col..*col + 1]);
                    view += &g;
                }
            }
            Op::Sparse(a, m) => {
                if self.needs(*a) {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for r in 0..m.rows() {
                        let src = g.row(r);
                        for (c, w) in m.row(r) {
                            ga.row_mut(c).scaled_add(w, &src);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Huber(a, cfg) => {
                if self.needs(*a) {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|x, &y| *x *= huber_grad(y, *cfg));
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], Array2::from_elem(self.value(*a).dim(), g[[0, 0]]));
                }
            }
            Op::SumSquares(a) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], self.value(*a) * (2.0 * g[[0, 0]]));
                }
            }
            Op::Dot(a, c) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], c.as_ref() * g[[0, 0]]);
                }
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    if self.needs(id) {
                        accumulate(&mut grads[id.0], Array2::from_elem((1, 1), w * g[[0, 0]]));
                    }
                }
            }
        }
    }

    /// Gradient of a scalar node with respect to `wrt`. Inputs that do not
    /// influence `loss` get zero gradients.
    pub fn grad(&self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Array2<f64>>> {
        if self.value(loss).dim() != (1, 1) {
            return Err(VfmError::InvalidArgument(format!(
                "gradient needs a scalar loss, node has shape {:?}",
                self.value(loss).dim()
            )));
        }
        let gs = self.backward(&[(loss, Array2::ones((1, 1)))])?;
        Ok(wrt
            .iter()
            .map(|&id| {
                gs.get(id)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(self.value(id).dim()))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of a scalar function of one matrix.
    fn fd<F: Fn(&Array2<f64>) -> f64>(x: &Array2<f64>, f: F) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let p = t.variable(array![[1.0, -2.0], [0.5, 3.0]]);
        let l = t.sum_squares(p);
        let g = t.grad(l, &[p]).unwrap();
        assert_eq!(g[0], array![[2.0, -4.0], [1.0, 6.0]]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let p = t.variable(array![[1.0, 2.0]]);
        assert!(t.grad(p, &[p]).is_err());
    }

    fn composite(x: &Array2<f64>, build_only: bool) -> (f64, Option<Array2<f64>>) {
        let mut t = Tape::new();
        let xi = t.variable(x.clone());
        let w = t.constant(array![[0.3, -0.7, 0.2], [1.1, 0.4, -0.5]]);
        let b = t.constant(array![[0.05, -0.1]]);
        let z = t.matmul_t(xi, w);
        let zb = t.add_row_bias(z, b);
        let h = t.tanh(zb);
        let d = t.one_minus_square(h);
        let st = t.vstack(&[h, zb]);
        let m = t.mul_tiled(st, d);
        let sl = t.row_slice(m, 1, 3);
        let c = t.column(sl, 1);
        let sc = t.scale_rows(c, Arc::new(vec![0.5, -2.0, 1.5]));
        let mut bld = crate::sparse::CsrBuilder::new(3);
        bld.push_row(&[(0, 1.0), (2, -1.0)]);
        bld.push_row(&[(1, 2.0)]);
        let sp = t.sparse(sc, Arc::new(bld.finish()));
        let hu = t.huber(sp, HuberConfig { beta: 0.2 });
        let l1 = t.sum(hu);
        let mm = t.mul(h, h);
        let ad = t.add(mm, d);
        let sb = t.sub(ad, h);
        let sca = t.scale(sb, 0.7);
        let l2 = t.sum_squares(sca);
        let l3 = t.dot_const(h, Arc::new(Array2::from_elem(h_dim(x), 0.3)));
        let total = t.weighted_sum(&[(l1, 2.0), (l2, 0.5), (l3, -1.0)]);
        let v = t.scalar(total);
        if build_only {
            return (v, None);
        }
        (v, Some(t.grad(total, &[xi]).unwrap().remove(0)))
    }

    fn h_dim(x: &Array2<f64>) -> (usize, usize) {
        (x.nrows(), 2)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let x = array![[0.2, -0.4, 0.9], [1.2, 0.1, -0.3], [-0.5, 0.6, 0.05], [0.3, 0.3, -0.8]];
        let (_, g) = composite(&x, false);
        let num = fd(&x, |p| composite(p, true).0);
        close(&g.unwrap(), &num, 1e-7);
    }

    #[test]
    fn unreachable_inputs_get_zero_gradient() {
        let mut t = Tape::new();
        let a = t.variable(array![[1.0]]);
        let b = t.variable(array![[2.0, 3.0]]);
        let l = t.sum_squares(a);
        let g = t.grad(l, &[a, b]).unwrap();
        assert_eq!(g[1], array![[0.0, 0.0]]);
    }
}
