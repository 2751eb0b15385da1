use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;

use nlsteer::cr3bp::{eom, State6, SystemConstants, Vec6};
use nlsteer::mon::{evaluate_bound, triangle_bound_check, GCoefficients};
use nlsteer::montecarlo::empirical_quantile;
use nlsteer::scenario::Scenario;
use nlsteer::stt::DiscretizedPlan;
use nlsteer::tensors::{tensor_two_norm, tensor_vector_power, DenseTensor, NormConfig};

fn tensor(dim: usize) -> impl Strategy<Value = DenseTensor> {
    prop::collection::vec(-5.0f64..5.0, dim * dim * dim)
        .prop_map(move |d| DenseTensor::from_data(3, dim, dim, d).unwrap().symmetrized_trailing())
}

fn fast_norm() -> NormConfig {
    NormConfig {
        restarts: 8,
        spot_checks: 64,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tensor_norm_bounds_every_power(b in tensor(4), v in prop::collection::vec(-3.0f64..3.0, 4)) {
        let n = tensor_two_norm(&b, &fast_norm()).unwrap().value;
        let v = DVector::from_vec(v);
        let lhs = tensor_vector_power(&b, &v, 2).unwrap().norm();
        prop_assert!(lhs <= n * v.norm_squared() * (1.0 + 1e-10) + 1e-14);
    }

    #[test]
    fn tensor_norm_is_absolutely_homogeneous(b in tensor(3), alpha in -20.0f64..20.0) {
        let cfg = fast_norm();
        let base = tensor_two_norm(&b, &cfg).unwrap().value;
        let scaled = tensor_two_norm(&b.scaled(alpha), &cfg).unwrap().value;
        prop_assert!((scaled - alpha.abs() * base).abs() <= 1e-10 * (1.0 + alpha.abs() * base));
    }

    #[test]
    fn tensor_norm_is_deterministic(b in tensor(3)) {
        let cfg = fast_norm();
        let a = tensor_two_norm(&b, &cfg).unwrap();
        let c = tensor_two_norm(&b, &cfg).unwrap();
        prop_assert_eq!(a.value.to_bits(), c.value.to_bits());
    }

    #[test]
    fn symmetrizing_twice_is_symmetrizing_once(d in prop::collection::vec(-1.0f64..1.0, 27)) {
        let t = DenseTensor::from_data(3, 3, 3, d).unwrap();
        let once = t.symmetrized_trailing();
        prop_assert_eq!(once.symmetrized_trailing(), once);
    }

    #[test]
    fn bound_is_monotone_and_objective_is_pointwise_max(
        g in prop::collection::vec(0.0f64..10.0, 25),
        r in prop::collection::vec(0.0f64..1.0, 5),
        v in prop::collection::vec(0.0f64..1.0, 5),
        bump in 0usize..5,
        lambda in 0.0f64..=1.0,
    ) {
        let mut coeffs = GCoefficients::zeros(5, 2);
        let b = &mut coeffs.blocks[0];
        for j in 0..5 {
            for k in 0..j {
                b.g_r[(j, k)] = g[j * 5 + k];
                b.g_v[(j, k)] = g[k * 5 + j];
            }
        }
        let base = evaluate_bound(&coeffs, &r, &v, lambda).unwrap();
        let blended = base.blended();
        prop_assert_eq!(base.objective, blended.iter().cloned().fold(0.0, f64::max));
        let mut r_up = r.clone();
        r_up[bump] += 0.5;
        let up = evaluate_bound(&coeffs, &r_up, &v, lambda).unwrap();
        for (a, b) in up.eps_r.iter().zip(&base.eps_r) {
            prop_assert!(a >= b);
        }
        prop_assert!(up.objective >= base.objective);
    }

    #[test]
    fn error_bound_ignores_deviation_sign(
        seed in any::<u64>(),
        devs in prop::collection::vec(prop::collection::vec(-1e-3f64..1e-3, 6), 3),
    ) {
        let stms: Vec<_> = (0..3).map(|k| nlsteer::cr3bp::Mat6::identity() * (1.0 + 0.1 * k as f64)).collect();
        let stts: Vec<DenseTensor> = (0..3u64)
            .map(|k| {
                let d = (0..216).map(|i| (((seed ^ (k * 977 + i)) % 1000) as f64 / 500.0) - 1.0).collect();
                DenseTensor::from_data(3, 6, 6, d).unwrap().symmetrized_trailing()
            })
            .collect();
        let plan = DiscretizedPlan::from_linear_maps(&stms, Some(stts)).unwrap();
        let g = nlsteer::mon::build_g_coefficients(&plan, 2, &fast_norm()).unwrap();
        let pos: Vec<Vec6> = devs.iter().map(|d| Vec6::from_column_slice(d)).collect();
        let neg: Vec<Vec6> = pos.iter().map(|d| -d).collect();
        let a = triangle_bound_check(&plan, &g, &pos).unwrap();
        let b = triangle_bound_check(&plan, &g, &neg).unwrap();
        prop_assert_eq!(&a.bounds, &b.bounds);
        prop_assert!(a.holds && b.holds);
    }

    #[test]
    fn empirical_quantile_is_monotone(
        xs in prop::collection::vec(-100.0f64..100.0, 1..200),
        p in 0.0f64..=1.0,
        q in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(empirical_quantile(&xs, lo).unwrap() <= empirical_quantile(&xs, hi).unwrap());
    }

    #[test]
    fn eom_respects_xz_mirror(
        r in prop::collection::vec(-1.5f64..1.5, 3),
        v in prop::collection::vec(-1.0f64..1.0, 3),
        t in -5.0f64..5.0,
    ) {
        let c = SystemConstants::earth_moon();
        let x = State6::new(Vector3::new(r[0], r[1], r[2]), Vector3::new(v[0], v[1], v[2]));
        let m = State6::new(Vector3::new(r[0], -r[1], r[2]), Vector3::new(-v[0], v[1], -v[2]));
        if let (Ok(f), Ok(g)) = (eom(t, &x, &c), eom(-t, &m, &c)) {
            // Time-reversed mirror image: (x, -y, z, -vx, vy, -vz), t -> -t.
            let flip = Vec6::new(-1.0, 1.0, -1.0, 1.0, -1.0, 1.0);
            prop_assert_eq!(g, f.component_mul(&flip));
        }
    }

    #[test]
    fn dynamics_fields_change_the_cache_key(
        dmu in 1e-9f64..1e-6,
        dx in 1e-9f64..1e-3,
        seg in 1usize..20,
        revs in 1usize..4,
        lambda in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let base = Scenario::l2_halo();
        let key = base.dynamics_fingerprint();
        let mut s = base;
        s.system.mu += dmu;
        prop_assert_ne!(s.dynamics_fingerprint(), key.clone());
        let mut s = base;
        s.orbit.initial_mean[0] += dx;
        prop_assert_ne!(s.dynamics_fingerprint(), key.clone());
        let mut s = base;
        s.orbit.segments_per_rev = seg;
        s.orbit.revs = revs;
        prop_assert_eq!(s.dynamics_fingerprint() == key, seg == 9 && revs == 2);
        let mut s = base;
        s.tuning.lambda = lambda;
        s.run.seed = seed;
        prop_assert_eq!(s.dynamics_fingerprint(), key);
    }
}

#[test]
fn matrix_tensor_norm_is_spectral_norm() {
    let m = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.5, 0.0, 3.0, 1.0, 1.0, 0.0, -2.0]);
    let n = tensor_two_norm(&DenseTensor::from_matrix(&m), &NormConfig::default()).unwrap().value;
    let svd = m.svd(false, false).singular_values.max();
    assert!((n - svd).abs() < 1e-9 * svd);
}
