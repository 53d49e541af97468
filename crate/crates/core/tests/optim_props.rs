use proptest::prelude::*;
use vfm_core::optim::{adamw_step, lbfgs_minimize, AdamWConfig, AdamWState, LbfgsConfig};
use vfm_core::Result;

/// `0.5 x'Mx - b'x + s * sum(cos(x))` with `M = B B' + I`.
fn objective(b_mat: Vec<Vec<f64>>, rhs: Vec<f64>, wiggle: f64) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
    let n = rhs.len();
    let m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| b_mat[i][k] * b_mat[j][k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    move |x: &[f64]| {
        let mx: Vec<f64> = m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        let f = 0.5 * x.iter().zip(&mx).map(|(a, b)| a * b).sum::<f64>()
            - x.iter().zip(&rhs).map(|(a, b)| a * b).sum::<f64>()
            + wiggle * x.iter().map(|v| v.cos()).sum::<f64>();
        let g = (0..x.len()).map(|i| mx[i] - rhs[i] - wiggle * x[i].sin()).collect();
        Ok((f, g))
    }
}

fn problem() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, f64)> {
    (2usize..7).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, n), n),
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
            0.0f64..2.0,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accepted_steps_satisfy_strong_wolfe((b, rhs, x0, wiggle) in problem()) {
        let cfg = LbfgsConfig { max_iter_per_step: 30, max_eval_per_step: 200, ..Default::default() };
        let mut f = objective(b, rhs, wiggle);
        let (x, out) = lbfgs_minimize(&mut f, &x0, &cfg).unwrap();
        for s in &out.accepted {
            prop_assert!(s.f_new <= s.f0 + cfg.wolfe_c1 * s.t * s.gtd0 + 1e-12 * s.f0.abs());
            prop_assert!(s.gtd_new.abs() <= cfg.wolfe_c2 * s.gtd0.abs() * (1.0 + 1e-12));
        }
        prop_assert!(out.loss_end <= out.loss_start);
        prop_assert_eq!(f(&x).unwrap().0, out.loss_end);
    }

    #[test]
    fn adamw_without_gradient_or_decay_is_identity(
        p in prop::collection::vec(-10.0f64..10.0, 1..20),
        steps in 1usize..20,
    ) {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut x = p.clone();
        let mut state = AdamWState::new(p.len());
        for _ in 0..steps {
            adamw_step(&mut state, &mut x, &vec![0.0; p.len()], &cfg).unwrap();
        }
        prop_assert_eq!(x, p);
    }
}
