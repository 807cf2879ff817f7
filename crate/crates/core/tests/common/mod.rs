#![allow(dead_code)]

use attnarb::panel::{synthetic_generate, MaskedCube, ReturnPanel, SyntheticConfig};
use attnarb::train::{evaluate_objective, objective_gradient, MarketData, ModelParams, RunConfig};
use ndarray::{s, Array1, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Small, fast configuration for protocol-level tests.
pub fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("n_factors", "2"),
        ("hidden", "4"),
        ("attention_dim", "4"),
        ("epochs", "2"),
        ("lookback", "10"),
        ("pca_window", "60"),
        ("train_years", "2"),
        ("validation_years", "1"),
        ("batch_days", "120"),
        ("ou_window", "20"),
        ("seeds", "0"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

pub fn small_panel(seed: u64) -> ReturnPanel {
    let cfg = SyntheticConfig {
        n_assets: 6,
        n_days: 800,
        n_factors: 2,
        n_characteristics: 3,
        ..Default::default()
    };
    synthetic_generate(&cfg, seed).unwrap()
}

/// Relative error of the analytic gradient against central differences,
/// `|g - g_fd| / max(|g_fd|, floor)` per parameter array (Euclidean norms).
pub struct GradCheck {
    pub errors: Vec<f64>,
    pub max_entry_error: f64,
}

pub fn fd_gradient_check(
    data: &MarketData,
    params: &ModelParams,
    cfg: &RunConfig,
    days: std::ops::Range<usize>,
    h: f64,
) -> GradCheck {
    let (_, grads) = objective_gradient(data, params, cfg, days.clone()).unwrap();
    let base = params.arrays();
    let mut errors = Vec::with_capacity(base.len());
    let mut max_entry_error = 0.0_f64;
    for (p, g) in grads.iter().enumerate() {
        let mut fd = ArrayD::zeros(base[p].raw_dim());
        for i in 0..base[p].len() {
            let eval = |delta: f64| {
                let mut arrays = base.clone();
                let flat = arrays[p].as_slice_mut().expect("standard layout");
                flat[i] += delta;
                let mut q = params.clone();
                q.set_arrays(&arrays).unwrap();
                evaluate_objective(data, &q, cfg, days.clone()).unwrap()
            };
            let v = (eval(h) - eval(-h)) / (2.0 * h);
            fd.as_slice_mut().unwrap()[i] = v;
        }
        let diff = (g - &fd).mapv(|v| v * v).sum().sqrt();
        let norm = fd.mapv(|v| v * v).sum().sqrt();
        errors.push(diff / norm.max(1e-8));
        for (a, b) in g.iter().zip(fd.iter()) {
            max_entry_error = max_entry_error.max((a - b).abs() / (a.abs().max(b.abs()).max(1e-6)));
        }
    }
    GradCheck {
        errors,
        max_entry_error,
    }
}

/// Copy of `panel` whose returns, risk-free rate and characteristics after
/// row `t` are replaced with noise.
pub fn corrupt_after(panel: &ReturnPanel, t: usize, seed: u64) -> ReturnPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = panel.returns().clone();
    let mut rf: Array1<f64> = panel.risk_free().clone();
    let mut chars = panel.characteristics().clone();
    returns
        .slice_mut(s![t + 1.., ..])
        .mapv_inplace(|_| 0.05 * rng.sample::<f64, _>(StandardNormal));
    rf.slice_mut(s![t + 1..]).mapv_inplace(|_| rng.random_range(0.0..0.001));
    chars
        .values
        .slice_mut(s![t + 1.., .., ..])
        .mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
    chars
        .observed
        .slice_mut(s![t + 1.., .., ..])
        .mapv_inplace(|_| rng.random::<f64>() > 0.3);
    ReturnPanel::new(
        panel.dates().to_vec(),
        panel.asset_ids().to_vec(),
        panel.characteristic_names().to_vec(),
        returns,
        MaskedCube {
            values: chars.values,
            observed: chars.observed,
        },
        rf,
    )
    .unwrap()
}
