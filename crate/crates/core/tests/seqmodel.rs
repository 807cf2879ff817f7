use attnarb::diffmath::{Graph, Tensor};
use attnarb::seqmodel::{
    longconv_forward, ou_fit, policy_weights, squash, threshold_policy, LongConvPolicyParams, Mode, OUFit,
    Position, Thresholds,
};
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Per-asset, per-layer direct evaluation of the policy.
fn direct_policy(x: &Array2<f64>, p: &LongConvPolicyParams) -> Array1<f64> {
    let (n, s) = x.dim();
    let d = p.hidden();
    let mut out = Array1::zeros(n);
    for a in 0..n {
        let mut u = Array2::from_shape_fn((d, s), |(h, t)| p.input_weight[h] * x[[a, t]] + p.input_bias[h]);
        for (l, layer) in p.layers.iter().enumerate() {
            let k = squash(&layer.kernel, p.squash).unwrap();
            let mut y = Array2::zeros((d, s));
            for h in 0..d {
                for t in 0..s {
                    let mut acc = layer.skip[h] * u[[h, t]];
                    for j in 0..=t {
                        acc += u[[h, j]] * k[[h, t - j]];
                    }
                    y[[h, t]] = acc;
                }
            }
            u = if l + 1 < p.layers.len() { y.mapv(gelu) } else { y };
        }
        out[a] = (0..d).map(|h| p.output_weight[h] * u[[h, s - 1]]).sum::<f64>() + p.output_bias;
    }
    out
}

fn randomized(hidden: usize, s: usize, layers: usize, seed: u64) -> LongConvPolicyParams {
    let mut p = LongConvPolicyParams::init(hidden, s, layers, 0.0, 0.01, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    p.input_bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    p.output_bias = rng.random_range(-0.5..0.5);
    p
}

fn histories(n: usize, s: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, s), |_| 0.01 * rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn fast_path_matches_layer_by_layer_oracle() {
    for (hidden, s, seed) in [(1, 5, 0), (4, 30, 1), (32, 30, 2), (8, 64, 3)] {
        let p = randomized(hidden, s, 1, seed);
        let x = histories(7, s, seed + 10);
        let fast = policy_weights(x.view(), &p).unwrap();
        let slow = direct_policy(&x, &p);
        assert!((&fast - &slow).iter().all(|v| v.abs() < 1e-10), "hidden {hidden} s {s}");
    }
}

#[test]
fn stacked_layers_match_oracle() {
    for layers in [2, 3] {
        let p = randomized(6, 20, layers, 4);
        let x = histories(5, 20, 5);
        let fast = policy_weights(x.view(), &p).unwrap();
        let slow = direct_policy(&x, &p);
        assert!((&fast - &slow).iter().all(|v| v.abs() < 1e-10));
    }
}

#[test]
fn longer_histories_use_the_latest_values() {
    let p = randomized(4, 10, 1, 6);
    let x = histories(3, 25, 7);
    let tail = x.slice(ndarray::s![.., 15..]).to_owned();
    assert_eq!(policy_weights(x.view(), &p).unwrap(), policy_weights(tail.view(), &p).unwrap());
}

fn layer_out(p: &LongConvPolicyParams, u: &Array3<f64>) -> Array3<f64> {
    let g = Graph::new();
    let uv = g.constant(&Tensor::from_array(u.clone()).unwrap());
    let k = g.constant(&Tensor::from_array(p.layers[0].kernel.clone()).unwrap());
    let d = g.constant(&Tensor::from_array(p.layers[0].skip.clone()).unwrap());
    let y = longconv_forward(&g, uv, k, d, p.squash, &mut Mode::Eval).unwrap();
    g.value(y).into_array().into_dimensionality().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn longconv_layer_is_linear(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let p = randomized(3, 12, 1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u1 = Array3::from_shape_fn((2, 3, 12), |_| rng.random_range(-1.0..1.0));
        let u2 = Array3::from_shape_fn((2, 3, 12), |_| rng.random_range(-1.0..1.0));
        let lhs = layer_out(&p, &(&u1 * a + &u2 * b));
        let rhs = layer_out(&p, &u1) * a + layer_out(&p, &u2) * b;
        prop_assert!((lhs - rhs).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn longconv_layer_is_causal(seed in 0u64..10_000, j in 0usize..12) {
        let p = randomized(3, 12, 1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Array3::from_shape_fn((1, 3, 12), |_| rng.random_range(-1.0..1.0));
        let mut v = u.clone();
        for h in 0..3 {
            v[[0, h, j]] += 1.0;
        }
        let (a, b) = (layer_out(&p, &u), layer_out(&p, &v));
        for h in 0..3 {
            for t in 0..j {
                prop_assert!((a[[0, h, t]] - b[[0, h, t]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn policy_is_permutation_equivariant(seed in 0u64..10_000, n in 2usize..10) {
        let p = randomized(5, 15, 1, seed);
        let x = histories(n, 15, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let xp = x.select(ndarray::Axis(0), &perm);
        let w = policy_weights(x.view(), &p).unwrap();
        let wp = policy_weights(xp.view(), &p).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            prop_assert_eq!(wp[i], w[src]);
        }
    }

    #[test]
    fn squash_shrinks_toward_zero(seed in 0u64..10_000, lambda in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Array2::from_shape_fn((4, 9), |_| rng.random_range(-1.5..1.5));
        let q = squash(&k, lambda).unwrap();
        for (a, b) in k.iter().zip(q.iter()) {
            prop_assert!(b.abs() <= a.abs());
            prop_assert!(*b == 0.0 || b.signum() == a.signum());
        }
    }

    #[test]
    fn hold_region_is_idempotent(s in -1.25f64..1.25, pos in 0usize..3) {
        let th = Thresholds::default();
        let fit = OUFit { intercept: 0.0, slope: 0.9, kappa: 26.5, mean: 0.0, sigma_eq: 1.0, s_score: s };
        let start = [Position::Short, Position::Flat, Position::Long][pos];
        let once = threshold_policy(&fit, start, &th);
        prop_assert_eq!(threshold_policy(&fit, once, &th), once);
        if s.abs() >= th.close {
            prop_assert!(once == start || once == Position::Flat);
            if s.abs() <= th.open && start == Position::Flat {
                prop_assert_eq!(once, Position::Flat);
            }
        }
    }
}

/// Exact discretization of `dX = -kappa X dt + sigma dW` on daily steps.
pub fn simulate_ou(kappa: f64, sigma: f64, steps: usize, seed: u64) -> Vec<f64> {
    let dt = 1.0 / 252.0;
    let b = (-kappa * dt).exp();
    let sd = sigma * ((1.0 - b * b) / (2.0 * kappa)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; steps];
    for t in 1..steps {
        x[t] = b * x[t - 1] + sd * rng.sample::<f64, _>(StandardNormal);
    }
    x
}

#[test]
fn ou_estimates_center_on_the_truth() {
    let mut kappas: Vec<f64> = (0..20)
        .map(|seed| ou_fit(&simulate_ou(10.0, 0.1, 2000, seed)).unwrap().kappa)
        .collect();
    kappas.sort_by(f64::total_cmp);
    let median = 0.5 * (kappas[9] + kappas[10]);
    assert!((median - 10.0).abs() < 2.0, "median kappa {median}");
    // Equilibrium volatility sigma / sqrt(2 kappa).
    let fit = ou_fit(&simulate_ou(10.0, 0.1, 20_000, 99)).unwrap();
    assert!((fit.sigma_eq - 0.1 / 20f64.sqrt()).abs() < 0.1 * 0.1 / 20f64.sqrt());
}
