use chrono::{Datelike, Duration, NaiveDate, Weekday};
use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{MaskedCube, ReturnPanel};
use crate::error::{Error, Result};
use crate::rng;

pub const TRADING_DAYS: f64 = 252.0;

/// Parameters of the synthetic clustered factor market.
///
/// Returns are `R_it = F_{c(i,t),t} + eps_it`: each asset loads with unit
/// beta on the factor of its current cluster `c(i,t)`, factors are i.i.d.
/// Gaussian, and each residual follows a discretized Ornstein-Uhlenbeck
/// process. Assets migrate between clusters at `cluster_switch_rate`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_assets: usize,
    pub n_days: usize,
    /// Number of latent clusters, one factor each.
    pub n_factors: usize,
    /// Cluster-membership plus pure-noise characteristics (`>= n_factors`).
    pub n_characteristics: usize,
    /// Daily factor volatilities; a single entry applies to every factor.
    pub factor_vols: Vec<f64>,
    /// Expected cluster reassignments per asset per year.
    pub cluster_switch_rate: f64,
    /// Residual mean-reversion speed per year.
    pub residual_kappa: f64,
    /// Stationary daily standard deviation of residuals.
    pub residual_vol: f64,
    /// Noise scale on the cluster-membership characteristics.
    pub characteristic_noise: f64,
    /// AR(1) coefficient of characteristic noise across days.
    pub characteristic_persistence: f64,
    /// Probability that a characteristic cell is missing.
    pub missing_rate: f64,
    /// Appends `pastret_d1`, `pastret_w1` and `pastret_volw1` computed from
    /// the panel's own returns.
    pub lagged_return_characteristics: bool,
    pub risk_free_annual: f64,
    pub start: NaiveDate,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_assets: 20,
            n_days: 3000,
            n_factors: 3,
            n_characteristics: 6,
            factor_vols: vec![0.02],
            cluster_switch_rate: 1.0,
            residual_kappa: 10.0,
            residual_vol: 0.005,
            characteristic_noise: 0.1,
            characteristic_persistence: 0.95,
            missing_rate: 0.01,
            lagged_return_characteristics: true,
            risk_free_annual: 0.02,
            start: NaiveDate::from_ymd_opt(1990, 1, 1).expect("valid date"),
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_assets < 4 {
            return fail("synthetic panel needs at least 4 assets");
        }
        if self.n_days < 300 {
            return fail("synthetic panel needs at least 300 days");
        }
        if self.n_factors < 1 {
            return fail("synthetic panel needs at least one factor");
        }
        if self.n_characteristics < self.n_factors {
            return fail("n_characteristics must be at least n_factors");
        }
        if self.factor_vols.is_empty()
            || (self.factor_vols.len() != 1 && self.factor_vols.len() != self.n_factors)
        {
            return fail("factor_vols needs one entry or one per factor");
        }
        if self.factor_vols.iter().any(|v| !(*v >= 0.0)) || !(self.residual_vol >= 0.0) {
            return fail("volatilities must be nonnegative");
        }
        if !(self.residual_kappa > 0.0) {
            return fail("residual_kappa must be positive");
        }
        if !(self.cluster_switch_rate >= 0.0) || self.cluster_switch_rate > TRADING_DAYS {
            return fail("cluster_switch_rate must lie in [0, 252]");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return fail("missing_rate must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.characteristic_persistence) {
            return fail("characteristic_persistence must lie in [0, 1)");
        }
        Ok(())
    }

    fn factor_vol(&self, k: usize) -> f64 {
        if self.factor_vols.len() == 1 {
            self.factor_vols[0]
        } else {
            self.factor_vols[k]
        }
    }
}

fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Balanced random cluster assignment.
pub(crate) fn cluster_assignment(n_assets: usize, n_factors: usize, seed: u64) -> Vec<usize> {
    let mut clusters: Vec<usize> = (0..n_assets).map(|i| i % n_factors).collect();
    clusters.shuffle(&mut rng::stream(seed, "data:clusters"));
    clusters
}

/// Daily cluster of every asset (`T x N`), starting from
/// [`cluster_assignment`].
pub(crate) fn cluster_paths(cfg: &SyntheticConfig, seed: u64) -> Array2<usize> {
    let (n, t, k) = (cfg.n_assets, cfg.n_days, cfg.n_factors);
    let mut current = cluster_assignment(n, k, seed);
    let mut out = Array2::zeros((t, n));
    let p = cfg.cluster_switch_rate / TRADING_DAYS;
    let mut r = rng::stream(seed, "data:switches");
    for d in 0..t {
        for i in 0..n {
            if d > 0 && k > 1 && p > 0.0 && r.random::<f64>() < p {
                let step = r.random_range(1..k);
                current[i] = (current[i] + step) % k;
            }
            out[[d, i]] = current[i];
        }
    }
    out
}

/// Generates a synthetic panel, deterministic in `seed`.
pub fn synthetic_generate(cfg: &SyntheticConfig, seed: u64) -> Result<ReturnPanel> {
    cfg.validate()?;
    let (n, t, k) = (cfg.n_assets, cfg.n_days, cfg.n_factors);
    let clusters = cluster_paths(cfg, seed);

    let mut factor_rng = rng::stream(seed, "data:factors");
    let mut factors = Array2::<f64>::zeros((t, k));
    for d in 0..t {
        for f in 0..k {
            let z: f64 = factor_rng.sample(StandardNormal);
            factors[[d, f]] = cfg.factor_vol(f) * z;
        }
    }

    let phi = (-cfg.residual_kappa / TRADING_DAYS).exp();
    let innovation = cfg.residual_vol * (1.0 - phi * phi).sqrt();
    let mut resid_rng = rng::stream(seed, "data:residuals");
    let mut residuals = Array2::<f64>::zeros((t, n));
    for i in 0..n {
        let z: f64 = resid_rng.sample(StandardNormal);
        residuals[[0, i]] = cfg.residual_vol * z;
    }
    for d in 1..t {
        for i in 0..n {
            let z: f64 = resid_rng.sample(StandardNormal);
            residuals[[d, i]] = phi * residuals[[d - 1, i]] + innovation * z;
        }
    }

    let mut returns = residuals;
    for d in 0..t {
        for i in 0..n {
            returns[[d, i]] += factors[[d, clusters[[d, i]]]];
        }
    }

    let n_lagged = if cfg.lagged_return_characteristics { 3 } else { 0 };
    let m = cfg.n_characteristics + n_lagged;
    let mut names: Vec<String> = (1..=k).map(|c| format!("cluster_{c}")).collect();
    names.extend((1..=cfg.n_characteristics - k).map(|c| format!("noise_{c}")));

    let mut values = Array3::<f64>::zeros((t, n, m));
    let rho = cfg.characteristic_persistence;
    let shock = (1.0 - rho * rho).sqrt();
    let mut char_rng = rng::stream(seed, "data:characteristics");
    let mut state = Array2::<f64>::zeros((n, cfg.n_characteristics));
    for d in 0..t {
        for i in 0..n {
            for c in 0..cfg.n_characteristics {
                let z: f64 = char_rng.sample(StandardNormal);
                state[[i, c]] = if d == 0 { z } else { rho * state[[i, c]] + shock * z };
                values[[d, i, c]] = if c < k {
                    let member = if clusters[[d, i]] == c { 1.0 } else { 0.0 };
                    member + cfg.characteristic_noise * state[[i, c]]
                } else {
                    state[[i, c]]
                };
            }
        }
    }
    if cfg.lagged_return_characteristics {
        names.extend(["pastret_d1", "pastret_w1", "pastret_volw1"].map(String::from));
        let base = cfg.n_characteristics;
        for d in 0..t {
            let lo = d.saturating_sub(4);
            for i in 0..n {
                let window: Vec<f64> = (lo..=d).map(|s| returns[[s, i]]).collect();
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                let var = window.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / window.len() as f64;
                values[[d, i, base]] = returns[[d, i]];
                values[[d, i, base + 1]] = window.iter().sum();
                values[[d, i, base + 2]] = var.sqrt();
            }
        }
    }

    let mut miss_rng = rng::stream(seed, "data:missing");
    let observed = Array3::from_shape_fn((t, n, m), |_| miss_rng.random::<f64>() >= cfg.missing_rate);

    let rf = Array1::from_elem(t, cfg.risk_free_annual / TRADING_DAYS);
    ReturnPanel::new(
        business_days(cfg.start, t),
        (0..n).map(|i| format!("A{i:03}")).collect(),
        names,
        returns,
        MaskedCube { values, observed },
        rf,
    )
}
