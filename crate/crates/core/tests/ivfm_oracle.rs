use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfm_core::grid::{extract_boundary, sector_segmentation};
use vfm_core::ivfm::{assemble_kkt, calibrate_lambda, ivfm_solve, solve_kkt, CalibrationFrame, KktSystem, DEFAULT_LAMBDA_S};
use vfm_core::parallel::ExecPolicy;
use vfm_core::phantom::{degrade, stream_function_field, synthesize_doppler};
use vfm_core::{BoundaryConditionSet, DegradeSpec, DopplerFrame, PolarGrid, StreamFunctionSpec, VelocityField};

fn phantom(n_r: usize, n_t: usize, margin: usize, snr_db: f64) -> (DopplerFrame, BoundaryConditionSet, VelocityField) {
    let grid = PolarGrid::sector(n_r, n_t).unwrap();
    let seg = sector_segmentation(&grid, margin).unwrap();
    let truth = stream_function_field(&StreamFunctionSpec::single_vortex(0.01), &grid, &seg).unwrap();
    let frame = synthesize_doppler(&truth, &grid, &seg, snr_db, 3).unwrap();
    let bc = extract_boundary(&seg, &grid, None).unwrap();
    (frame, bc, truth)
}

fn dense(sys: &KktSystem) -> DMatrix<f64> {
    let k = sys.to_dense();
    let n = k.len();
    DMatrix::from_fn(n, n, |i, j| k[i][j])
}

fn constraint_matrix(sys: &KktSystem) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(sys.n_constraints(), sys.n_unknowns());
    for (r, c, v) in sys.a.triplets() {
        a[(r, c)] += v;
    }
    a
}

#[test]
fn small_frame_matches_dense_solve() {
    let (frame, bc, _) = phantom(8, 10, 1, 20.0);
    for lambda in [0.0, DEFAULT_LAMBDA_S, 1e-3] {
        let sys = assemble_kkt(&frame, &bc, lambda).unwrap();
        assert!(sys.n_unknowns() + sys.n_constraints() <= 400);
        let oracle = dense(&sys).lu().solve(&DVector::from_vec(sys.rhs())).expect("nonsingular saddle matrix");
        let (z, _, _) = solve_kkt(&sys).unwrap();
        let err = z.iter().zip(oracle.iter()).take(sys.n_unknowns()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-8, "lambda {lambda}: max abs diff {err:e}");
        let x = &z[..sys.n_unknowns()];
        let b_inf = sys.rhs_constraint.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(sys.constraint_residual(x) < 1e-8 * b_inf);
    }
}

#[test]
fn solution_is_optimal_on_the_feasible_set() {
    let (frame, bc, _) = phantom(8, 10, 1, 20.0);
    let sys = assemble_kkt(&frame, &bc, DEFAULT_LAMBDA_S).unwrap();
    let sol = ivfm_solve(&frame, &bc, DEFAULT_LAMBDA_S).unwrap();
    let a = constraint_matrix(&sys);
    let gram = (&a * a.transpose()).cholesky().expect("full row rank");
    let f0 = sys.objective(&sol.x);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scale = sol.x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
    for _ in 0..100 {
        let d = DVector::from_fn(sys.n_unknowns(), |_, _| rng.gen_range(-1.0..1.0) * scale);
        let d = &d - a.transpose() * gram.solve(&(&a * &d));
        assert!((&a * &d).amax() < 1e-10 * scale);
        let moved: Vec<f64> = sol.x.iter().zip(d.iter()).map(|(x, d)| x + 1e-4 * d).collect();
        assert!(sys.objective(&moved) >= f0 - 1e-12);
    }
}

#[test]
fn repeated_solves_are_bit_identical() {
    let (frame, bc, _) = phantom(16, 30, 2, 30.0);
    let a = ivfm_solve(&frame, &bc, DEFAULT_LAMBDA_S).unwrap();
    let b = ivfm_solve(&frame, &bc, DEFAULT_LAMBDA_S).unwrap();
    assert_eq!(a.field, b.field);
    assert_eq!(a.multipliers, b.multipliers);
}

#[test]
fn masked_scanlines_keep_mass_conservation_rows() {
    let (frame, bc, _) = phantom(16, 40, 2, f64::INFINITY);
    let sparse = degrade(&frame, &DegradeSpec::SparseDeterministic { m: 10, n: 9 }).unwrap();
    let full = assemble_kkt(&frame, &bc, DEFAULT_LAMBDA_S).unwrap();
    let thin = assemble_kkt(&sparse, &bc, DEFAULT_LAMBDA_S).unwrap();
    assert_eq!(full.n_c1, thin.n_c1);
    assert_eq!(full.n_c2, thin.n_c2);
    assert!(thin.n_data < full.n_data);
    assert_eq!(thin.n_data, sparse.valid_count());
}

#[test]
fn calibration_curve_behaviour() {
    let (frame, bc, truth) = phantom(20, 50, 2, f64::INFINITY);
    let frames = vec![CalibrationFrame { frame, bc, truth }];
    let single = calibrate_lambda(&frames, &[3e-5], ExecPolicy::Sequential).unwrap();
    assert_eq!(single.best, 3e-5);
    assert_eq!(single.curve.len(), 1);

    let mut candidates = vec![0.0];
    candidates.extend((0..=8).map(|k| 10f64.powi(-10 + k)));
    let res = calibrate_lambda(&frames, &candidates, ExecPolicy::Parallel).unwrap();
    let best_err = res.curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let (largest, tail_err) = *res.curve.last().unwrap();
    assert_eq!(largest, 1e-2);
    assert!(tail_err >= best_err);
    // No noise to smooth away: the best weight sits at the small end.
    assert!(res.best > 0.0 && res.best <= 1e-6, "best {}, curve {:?}", res.best, res.curve);
}
