use attnarb::trading::{explained_variance_value, sharpe_value, transaction_cost, CostModel, PortfolioPath};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::collection::vec;

fn arr(v: &[f64]) -> Array1<f64> {
    Array1::from(v.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cost_is_nonnegative_and_zero_only_when_idle(w in vec(-1.0f64..1.0, 1..8), p in vec(-1.0f64..1.0, 1..8)) {
        let n = w.len().min(p.len());
        let (w, p) = (arr(&w[..n]), arr(&p[..n]));
        let c = CostModel::default();
        let v = transaction_cost(w.view(), p.view(), &c);
        prop_assert!(v >= 0.0);
        let idle = w == p && w.iter().all(|&x| x >= 0.0);
        prop_assert_eq!(v == 0.0, idle);
        let pos = w.mapv(f64::abs);
        prop_assert_eq!(transaction_cost(pos.view(), pos.view(), &c), 0.0);
    }

    #[test]
    fn cost_is_convex(a in vec(-1.0f64..1.0, 4), b in vec(-1.0f64..1.0, 4), p in vec(-1.0f64..1.0, 4), theta in 0.0f64..1.0) {
        let (a, b, p) = (arr(&a), arr(&b), arr(&p));
        let c = CostModel::default();
        let mix = &a * theta + &b * (1.0 - theta);
        let lhs = transaction_cost(mix.view(), p.view(), &c);
        let rhs = theta * transaction_cost(a.view(), p.view(), &c) + (1.0 - theta) * transaction_cost(b.view(), p.view(), &c);
        prop_assert!(lhs <= rhs + 1e-15);
    }

    #[test]
    fn sharpe_ignores_scale_of_excess(r in vec(-0.05f64..0.05, 3..40), scale in 0.01f64..100.0, rf in 0.0f64..0.001) {
        let r = arr(&r);
        let var = r.var(0.0);
        prop_assume!(var > 1e-10);
        let rfv = Array1::from_elem(r.len(), rf);
        let base = sharpe_value(r.view(), rfv.view()).unwrap();
        let scaled = (&r - rf) * scale + rf;
        let s2 = sharpe_value(scaled.view(), rfv.view()).unwrap();
        // The 1e-8 guard in the denominator breaks exact invariance only at
        // relative order 1e-16 / var.
        prop_assert!((base - s2).abs() <= 1e-6 * (1.0 + base.abs()));
        let shifted = sharpe_value((&r + 0.01).view(), (&rfv + 0.01).view()).unwrap();
        prop_assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn explained_variance_at_most_one(seed in 0u64..10_000, c in vec(-1.0f64..1.0, 3)) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let r = Array2::from_shape_fn((20, 3), |_| rng.random_range(-0.1..0.1));
        let e = Array2::from_shape_fn((20, 3), |_| rng.random_range(-0.1..0.1));
        prop_assert!(explained_variance_value(e.view(), r.view()).unwrap() <= 1.0);
        let constant = Array2::from_shape_fn((20, 3), |(_, j)| c[j]);
        prop_assert!((explained_variance_value(constant.view(), r.view()).unwrap() - 1.0).abs() < 1e-15);
        let mut nearly = constant.clone();
        nearly[[3, 1]] += 0.01;
        prop_assert!(explained_variance_value(nearly.view(), r.view()).unwrap() < 1.0);
    }
}

#[test]
fn worked_cost_examples() {
    let c = CostModel::default();
    let z = arr(&[0.0, 0.0]);
    assert_eq!(transaction_cost(arr(&[0.3, 0.7]).view(), arr(&[0.3, 0.7]).view(), &c), 0.0);
    assert!((transaction_cost(arr(&[0.5, -0.5]).view(), z.view(), &c) - 0.00055).abs() < 1e-18);
    assert!((transaction_cost(arr(&[0.0, 1.0]).view(), arr(&[1.0, 0.0]).view(), &c) - 0.001).abs() < 1e-18);
}

#[test]
fn path_charges_entry_cost_then_turnover() {
    let w = Array2::from_shape_vec((3, 2), vec![0.5, -0.5, 0.5, -0.5, -0.5, 0.5]).unwrap();
    let r = Array2::from_shape_vec((3, 2), vec![0.01, 0.0, 0.0, 0.02, 0.01, -0.01]).unwrap();
    let p = PortfolioPath::new(w, r.view(), None, &CostModel::default()).unwrap();
    assert!((p.costs[0] - 0.00055).abs() < 1e-18);
    assert!((p.costs[1] - 0.00005).abs() < 1e-18);
    assert!((p.costs[2] - (0.0005 * 2.0 + 0.00005)).abs() < 1e-18);
    assert_eq!(p.net, &p.gross - &p.costs);
    assert!((p.gross[2] - (-0.01)).abs() < 1e-18);
}
