use approx::assert_relative_eq;
use ndarray::Array2;
use proptest::prelude::*;
use vfm_core::field::Component;
use vfm_core::metrics::{aggregate_robust, median, nrmse, squared_correlation};
use vfm_core::VelocityField;

fn field(vr: &[f64], vt: &[f64]) -> VelocityField {
    let n = vr.len();
    VelocityField::new(
        Array2::from_shape_vec((1, n), vr.to_vec()).unwrap(),
        Array2::from_shape_vec((1, n), vt.to_vec()).unwrap(),
    )
    .unwrap()
}

fn spread(v: &[f64]) -> f64 {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (4usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

proptest! {
    #[test]
    fn r2_is_affine_invariant(
        (a, b) in pairs(),
        scale in prop_oneof![-50.0f64..-0.05, 0.05f64..50.0],
        shift in -100.0f64..100.0,
    ) {
        prop_assume!(spread(&a) > 1e-3 && spread(&b) > 1e-3);
        let mask = vec![true; a.len()];
        let reference = field(&b, &b);
        let est = field(&a, &a);
        let mapped: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
        let r0 = squared_correlation(&est, &reference, &mask, Component::Radial).unwrap();
        let r1 = squared_correlation(&field(&mapped, &a), &reference, &mask, Component::Radial).unwrap();
        prop_assert!((0.0..=1.0).contains(&r0));
        prop_assert!((r0 - r1).abs() <= 1e-9, "{} vs {}", r0, r1);
    }

    #[test]
    fn nrmse_is_scale_invariant((a, b) in pairs(), s in 1e-3f64..1e3) {
        prop_assume!(b.iter().any(|v| v.abs() > 1e-3));
        let mask = vec![true; a.len()];
        let e0 = nrmse(&field(&a, &b), &field(&b, &a), &mask).unwrap();
        let sa: Vec<f64> = a.iter().map(|x| s * x).collect();
        let sb: Vec<f64> = b.iter().map(|x| s * x).collect();
        let e1 = nrmse(&field(&sa, &sb), &field(&sb, &sa), &mask).unwrap();
        prop_assert!(e0 >= 0.0);
        prop_assert!((e0 - e1).abs() <= 1e-9 * e0.max(1.0));
    }

    #[test]
    fn aggregation_ignores_order(mut v in prop::collection::vec(-1e3f64..1e3, 1..30), seed in any::<u64>()) {
        let a = aggregate_robust(&v).unwrap();
        // Deterministic shuffle from the seed.
        let mut s = seed;
        for i in (1..v.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            v.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(a, aggregate_robust(&v).unwrap());
    }

    #[test]
    fn median_translates_with_data(v in prop::collection::vec(-1e3f64..1e3, 1..30), t in -1e3f64..1e3) {
        let m = median(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + t).collect();
        let a = aggregate_robust(&shifted).unwrap();
        prop_assert!((a.median - (m + t)).abs() <= 1e-9 * (1.0 + m.abs() + t.abs()));
    }
}

#[test]
fn constant_offset_and_zero_estimate() {
    let vr = [0.3, -0.4, 0.0, 0.5];
    let vt = [0.4, 0.3, 0.5, 0.0];
    let reference = field(&vr, &vt);
    let mask = [true; 4];
    let shifted: Vec<f64> = vr.iter().map(|v| v + 0.05).collect();
    assert_relative_eq!(nrmse(&field(&shifted, &vt), &reference, &mask).unwrap(), 10.0, max_relative = 1e-12);
    assert_relative_eq!(nrmse(&field(&[0.0; 4], &[0.0; 4]), &reference, &mask).unwrap(), 100.0, max_relative = 1e-12);
}
