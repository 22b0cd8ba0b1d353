mod common;

use proptest::prelude::*;

use common::randn;
use scd_core::diffusion::{euler_sample, forward_path, shift_time, target_velocity, SamplerConfig};

proptest! {
    #[test]
    fn path_derivative_is_target_velocity(seed in 0u64..500, t in 0.01f64..0.99) {
        let x = randn(&[3, 4], seed);
        let eps = randn(&[3, 4], seed + 1);
        let h = 1e-6;
        let up = forward_path(&x, &eps, t + h).unwrap();
        let dn = forward_path(&x, &eps, t - h).unwrap();
        let fd = up.sub(&dn).unwrap().scale(1.0 / (2.0 * h));
        prop_assert!(fd.max_abs_diff(&target_velocity(&x, &eps).unwrap()) < 1e-6);
    }

    #[test]
    fn euler_is_exact_on_constant_fields(
        seed in 0u64..500,
        interior in prop::collection::btree_set(1u32..999, 0..12),
    ) {
        let mut times: Vec<f64> = std::iter::once(1.0)
            .chain(interior.iter().rev().map(|&i| i as f64 / 1000.0))
            .chain(std::iter::once(0.0))
            .collect();
        times.dedup();
        let sampler = SamplerConfig::from_times(times).unwrap();
        let x0 = randn(&[2, 3], seed);
        let eps = randn(&[2, 3], seed + 1);
        let u = target_velocity(&x0, &eps).unwrap();
        let out = euler_sample(|_, _, _| Ok(u.clone()), &eps, &sampler).unwrap();
        prop_assert!(out.max_abs_diff(&x0) <= 1e-12);
    }
}

#[test]
fn shift_is_a_bijection_with_reciprocal_inverse() {
    for k in [0.25, 0.5, 1.0, 2.0, 3.0, 7.5] {
        let mut prev = -1.0;
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let s = shift_time(k, t).unwrap();
            assert!((0.0..=1.0).contains(&s));
            assert!(s > prev, "k={k} not increasing at t={t}");
            prev = s;
            assert!((shift_time(1.0 / k, s).unwrap() - t).abs() <= 1e-12, "k={k} t={t}");
        }
    }
}
