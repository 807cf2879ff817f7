mod common;

use attnarb::backtest::{
    ablate, annualized_metrics, cumulative_returns, market_beta, metrics_csv, multi_seed, top_constituents,
    write_cumulative_csv, write_ledger_csv, BacktestLedger, MetricsRow,
};
use attnarb::train::{factor_weights_at, rolling_protocol, MarketData, ModelClass};
use attnarb::Error;
use chrono::NaiveDate;
use common::{small_config, small_panel};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn ledger(gross: Vec<f64>, cost: Vec<f64>, seed: u64) -> BacktestLedger {
    let t = gross.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
    let gross = Array1::from(gross);
    let costs = Array1::from(cost);
    BacktestLedger {
        dates: (0..t).map(|i| start + chrono::Duration::days(i as i64)).collect(),
        asset_ids: vec!["A".into(), "B".into()],
        weights: Array2::zeros((t, 2)),
        net: &gross - &costs,
        gross,
        costs,
        market: Array1::from_shape_fn(t, |_| 0.01 * rng.sample::<f64, _>(StandardNormal)),
        risk_free: Array1::from_elem(t, 1e-5),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_survive_chunking(g in proptest::collection::vec(-0.03f64..0.03, 6..80), cut in 1usize..80, seed in 0u64..1000) {
        let t = g.len();
        let cut = cut.min(t - 1);
        let l = ledger(g, vec![1e-4; t], seed);
        let parts = [l.slice(0..cut), l.slice(cut..t)];
        let joined = BacktestLedger::concat(&parts).unwrap();
        prop_assert_eq!(&joined, &l);
        prop_assert_eq!(annualized_metrics(&joined).unwrap(), annualized_metrics(&l).unwrap());
    }

    #[test]
    fn constant_costs_lower_the_sharpe(g in proptest::collection::vec(-0.03f64..0.03, 3..60), c in 0.0f64..0.002, seed in 0u64..1000) {
        let t = g.len();
        let m = annualized_metrics(&ledger(g, vec![c; t], seed)).unwrap();
        prop_assume!(!m.degenerate);
        prop_assert!((m.sigma - m.sigma_net).abs() < 1e-9 * (1.0 + m.sigma));
        prop_assert!(m.sr_net <= m.sr + 1e-12);
    }

    #[test]
    fn sum_series_is_prefix_sum(r in proptest::collection::vec(-0.1f64..0.1, 0..50)) {
        let c = cumulative_returns(Array1::from(r.clone()).view());
        let mut acc = 0.0;
        for (i, v) in r.iter().enumerate() {
            acc += v;
            prop_assert!((c.sum[i] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn independent_noise_has_no_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = Array1::from_shape_fn(5000, |_| rng.sample::<f64, _>(StandardNormal));
    let p = Array1::from_shape_fn(5000, |_| rng.sample::<f64, _>(StandardNormal));
    assert!(market_beta(p.view(), m.view()).unwrap().abs() < 0.05);
}

#[test]
fn empty_ablation_reproduces_baseline() {
    let panel = small_panel(8);
    let cfg = small_config();
    let results = ablate(&panel, &cfg, &[], ModelClass::Attention).unwrap();
    assert_eq!(results.len(), 1);
    assert!(results[0].excluded.is_none());
    let (report, _) = multi_seed(&panel, &cfg, ModelClass::Attention).unwrap();
    assert_eq!(results[0].report, report);
    assert!(matches!(
        ablate(&panel, &cfg, &["bogus".into()], ModelClass::Attention),
        Err(Error::Config(_))
    ));
}

#[test]
fn ablation_lists_baseline_first() {
    let panel = small_panel(9);
    let cfg = small_config();
    let r = ablate(&panel, &cfg, &["noise".into(), "pastret".into()], ModelClass::Attention).unwrap();
    assert_eq!(r.len(), 3);
    assert_eq!(r[0].excluded, None);
    assert_eq!(r[1].excluded.as_deref(), Some("noise"));
    assert_eq!(r[2].excluded.as_deref(), Some("pastret"));
}

#[test]
fn constituents_of_trained_factors() {
    let panel = small_panel(10);
    let cfg = small_config();
    let run = rolling_protocol(&panel, &cfg, ModelClass::Attention).unwrap();
    let data = MarketData::new(&panel, ModelClass::Attention, &cfg).unwrap();
    let w = &run.windows[0];
    let wf = factor_weights_at(&data, w.params(), w.traded.start).unwrap();
    let c = top_constituents(wf.view(), panel.asset_ids(), 3).unwrap();
    assert_eq!(c.len(), cfg.n_factors);
    for f in &c {
        assert_eq!(f.members.len(), 3);
        assert!(f.share > 0.0 && f.share <= 1.0 + 1e-12);
        assert!(f.members.windows(2).all(|m| m[0].weight >= m[1].weight));
    }
}

#[test]
fn csv_outputs() {
    let panel = small_panel(11);
    let cfg = small_config();
    let run = rolling_protocol(&panel, &cfg, ModelClass::PcaOu).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let lp = dir.path().join("ledger.csv");
    write_ledger_csv(&lp, &run.ledger).unwrap();
    let text = std::fs::read_to_string(&lp).unwrap();
    assert_eq!(text.lines().count(), run.ledger.len() + 1);
    assert!(text.starts_with("date,gross_return,cost,net_return,market_return,rf,w_A000"));

    let cp = dir.path().join("cum.csv");
    write_cumulative_csv(&cp, &run.ledger.dates, &cumulative_returns(run.ledger.net.view())).unwrap();
    let text = std::fs::read_to_string(&cp).unwrap();
    assert_eq!(text.lines().next().unwrap(), "date,sum_return,compounded_return");

    let m = annualized_metrics(&run.ledger).unwrap();
    let csv = metrics_csv(&[MetricsRow { model: "pca_ou".into(), k: 2, seed: 0, metrics: m }]);
    assert_eq!(csv.lines().count(), 2);
    // No temporary files are left behind.
    let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(leftovers, 2);
}
