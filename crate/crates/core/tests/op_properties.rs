mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use common::{op_checks, randn, ALL_OPS};
use scd_core::{Tensor, Var};

const OP_TOL: f64 = 1e-4;
const OP_TRIALS: u64 = 100;

#[test]
fn every_op_matches_central_differences() {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut kinds = std::collections::BTreeSet::new();
    for trial in 0..OP_TRIALS {
        for (kind, name, f) in op_checks(trial, 1e-5) {
            kinds.insert(kind.name());
            let e = f().unwrap();
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(e);
        }
    }
    for k in ALL_OPS {
        assert!(kinds.contains(k.name()), "{} unchecked", k.name());
    }
    for (name, e) in &worst {
        assert!(*e < OP_TOL, "{name}: {e:e}");
    }
}

fn finite_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-30.0f64..30.0, r * c)))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((r, c, v) in finite_matrix(), shift in -50.0f64..50.0) {
        let x: Tensor<f64> = Tensor::from_f64(&[r, c], &v).unwrap();
        let y = Var::constant(x.clone()).softmax_lastdim().unwrap();
        for row in y.value().data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        // dyadic inputs keep x + c exact, so the max-subtracted logits match bitwise
        let q: Vec<f64> = v.iter().map(|a| (a * 1024.0).round() / 1024.0).collect();
        let base = Var::<f64>::constant(Tensor::from_f64(&[r, c], &q).unwrap()).softmax_lastdim().unwrap();
        let shifted = Tensor::from_f64(&[r, c], &q.iter().map(|a| a + shift.round()).collect::<Vec<_>>()).unwrap();
        let ys = Var::constant(shifted).softmax_lastdim().unwrap();
        prop_assert!(ys.value().bitwise_eq(base.value()));
    }

    #[test]
    fn layer_norm_rows_are_standardized((r, c, v) in finite_matrix()) {
        prop_assume!(c >= 2);
        let x: Tensor<f64> = Tensor::from_f64(&[r, c], &v).unwrap();
        let y = Var::constant(x.clone()).layer_norm().unwrap();
        for (row, xr) in y.value().data().chunks(c).zip(x.data().chunks(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / c as f64;
            let xm = xr.iter().sum::<f64>() / c as f64;
            let xv = xr.iter().map(|a| (a - xm).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() <= 1e-5);
            // epsilon 1e-5 shrinks the variance to xv / (xv + eps)
            prop_assert!((var - xv / (xv + 1e-5)).abs() <= 1e-5);
        }
    }

    #[test]
    fn reshape_round_trip((r, c, v) in finite_matrix()) {
        let x = Var::<f64>::constant(Tensor::from_f64(&[r, c], &v).unwrap());
        let y = x.reshape(&[r * c]).unwrap().reshape(&[c, r]).unwrap().reshape(&[r, c]).unwrap();
        prop_assert!(y.value().bitwise_eq(x.value()));
    }

    #[test]
    fn ops_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let a = Var::leaf(randn(&[4, 6], seed), true);
            let w = Var::leaf(randn(&[6, 3], seed + 1), true);
            let y = a.matmul(&w).unwrap().gelu().unwrap().layer_norm().unwrap().softmax_lastdim().unwrap();
            let l = y.sum_sq().unwrap();
            l.backward().unwrap();
            (l.value().clone(), a.grad().unwrap(), w.grad().unwrap())
        };
        let (l1, a1, w1) = run();
        let (l2, a2, w2) = run();
        prop_assert!(l1.bitwise_eq(&l2) && a1.bitwise_eq(&a2) && w1.bitwise_eq(&w2));
    }
}
