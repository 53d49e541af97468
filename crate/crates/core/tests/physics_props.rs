use ndarray::Array2;
use proptest::prelude::*;
use vfm_core::grid::{sector_segmentation, PolarGrid, Segmentation};
use vfm_core::phantom::{CavityBox, StreamTerm};
use vfm_core::physics::{
    c1_residual, huber, huber_grad, pde_residual_lattice, smoothing_energy, HuberConfig, StencilKind,
};
use vfm_core::{StreamFunctionSpec, VelocityField};

fn lattice(n_r: usize, n_t: usize, f: impl Fn(usize, usize) -> f64) -> Array2<f64> {
    Array2::from_shape_fn((n_r, n_t), |(i, j)| f(i, j))
}

proptest! {
    #[test]
    fn huber_is_symmetric_and_below_quadratic(x in -50.0f64..50.0, beta in 1e-3f64..10.0) {
        let cfg = HuberConfig::new(beta).unwrap();
        prop_assert_eq!(huber(x, cfg), huber(-x, cfg));
        prop_assert!(huber(x, cfg) >= 0.0);
        prop_assert!(huber(x, cfg) <= 0.5 * x * x / beta * (1.0 + 1e-15));
    }

    #[test]
    fn huber_is_c1_at_the_transition(beta in 1e-3f64..10.0) {
        let cfg = HuberConfig::new(beta).unwrap();
        let h = 1e-9 * beta;
        prop_assert!((huber(beta - h, cfg) - huber(beta + h, cfg)).abs() <= 4.0 * h);
        prop_assert!((huber_grad(beta - h, cfg) - huber_grad(beta + h, cfg)).abs() <= 1e-8);
    }

    #[test]
    fn c1_is_linear_at_fixed_radius(
        r in 1e-3f64..1.0,
        a in prop::array::uniform3(-10.0f64..10.0),
        b in prop::array::uniform3(-10.0f64..10.0),
        s in -3.0f64..3.0,
    ) {
        let lhs = c1_residual(r, a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]).unwrap();
        let rhs = c1_residual(r, a[0], a[1], a[2]).unwrap() + s * c1_residual(r, b[0], b[1], b[2]).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs() + rhs.abs()) * 10.0 * r.max(1.0));
    }

    #[test]
    fn smoothing_ignores_affine_lattice_fields(
        a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0,
        seed in 0u64..1000,
    ) {
        let grid = PolarGrid::sector(9, 11).unwrap();
        let seg = sector_segmentation(&grid, 1).unwrap();
        let bump = seed as f64 / 1000.0 + 0.1;
        let base = lattice(9, 11, |i, j| bump * ((i * i) as f64 + (i * j) as f64 * 0.5));
        let affine = lattice(9, 11, |i, j| a * i as f64 + b * j as f64 + c);
        let f0 = VelocityField::new(base.clone(), base.clone()).unwrap();
        let f1 = VelocityField::new(&base + &affine, &base - &affine).unwrap();
        let e0 = smoothing_energy(&f0, &grid, &seg).unwrap();
        let e1 = smoothing_energy(&f1, &grid, &seg).unwrap();
        prop_assert!(e0 > 0.0);
        prop_assert!((e0 - e1).abs() <= 1e-9 * e0);
    }

    #[test]
    fn stream_functions_are_divergence_free(
        amps in prop::collection::vec(-0.05f64..0.05, 1..4),
        modes in prop::collection::vec((1u32..4, 1u32..4), 4),
        pr in 0.0f64..1.0, pt in 0.0f64..1.0,
    ) {
        let spec = StreamFunctionSpec {
            terms: amps.iter().zip(&modes).map(|(&amplitude, &(mode_r, mode_theta))| StreamTerm {
                amplitude, mode_r, mode_theta,
            }).collect(),
        };
        let bx = CavityBox { r_a: 0.03, r_b: 0.09, theta_a: -0.5, theta_b: 0.4 };
        let r = bx.r_a + pr * bx.radial_extent();
        let t = bx.theta_a + pt * bx.angular_extent();
        let s = spec.sample(&bx, r, t);
        let c1 = c1_residual(r, s.v_r, s.dvr_dr, s.dvtheta_dtheta).unwrap();
        let scale = 1.0 + amps.iter().map(|a| a.abs()).sum::<f64>() * 1e3;
        prop_assert!(c1.abs() <= 1e-13 * scale, "C1 = {}", c1);
    }
}

#[test]
fn linear_radial_flow_residual_is_exact() {
    let grid = PolarGrid::sector(10, 12).unwrap();
    let seg = Segmentation::full(&grid);
    let (a, b) = (3.0, -0.2);
    let v_r = lattice(10, 12, |i, _| a * grid.radius(i) + b);
    let field = VelocityField::new(v_r, Array2::zeros((10, 12))).unwrap();
    let lat = pde_residual_lattice(&field, &grid, &seg, None).unwrap();
    let mut central = 0;
    for ((i, j), &k) in lat.kind.indexed_iter() {
        if k == StencilKind::Central {
            let expect = 2.0 * a * grid.radius(i) + b;
            assert!((lat.values[[i, j]] - expect).abs() < 1e-13, "({i},{j})");
            central += 1;
        }
    }
    assert_eq!(central, 8 * 10);
}
