//! Out-of-sample evaluation: annualized metrics, market beta, cumulative
//! returns, characteristic-group ablations, and factor constituents.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{fmt_num, write_atomic};
use crate::panel::{ReturnPanel, TRADING_DAYS};
use crate::trading::{CostModel, PortfolioPath};
use crate::train::{rolling_protocol, ModelClass, RunConfig};

/// Daily out-of-sample record of one strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct BacktestLedger {
    pub dates: Vec<NaiveDate>,
    pub asset_ids: Vec<String>,
    /// `T x N`.
    pub weights: Array2<f64>,
    pub gross: Array1<f64>,
    pub costs: Array1<f64>,
    pub net: Array1<f64>,
    /// Equal-weighted market return.
    pub market: Array1<f64>,
    pub risk_free: Array1<f64>,
}

impl BacktestLedger {
    /// Ledger of `weights` traded on the panel rows `days` (increasing).
    /// Costs of the first row are charged from an empty book.
    pub fn from_weights(panel: &ReturnPanel, days: &[usize], weights: Array2<f64>, cost: &CostModel) -> Result<Self> {
        if weights.nrows() != days.len() || weights.ncols() != panel.n_assets() {
            return Err(Error::contract(format!(
                "weights {:?} for {} days and {} assets",
                weights.dim(),
                days.len(),
                panel.n_assets()
            )));
        }
        if days.windows(2).any(|w| w[0] >= w[1]) || days.last().is_some_and(|&d| d >= panel.n_dates()) {
            return Err(Error::contract("ledger days must be increasing panel rows"));
        }
        let returns = panel.returns().select(Axis(0), days);
        let path = PortfolioPath::new(weights, returns.view(), None, cost)?;
        let market = panel.market_returns().select(Axis(0), days);
        Ok(Self {
            dates: days.iter().map(|&d| panel.dates()[d]).collect(),
            asset_ids: panel.asset_ids().to_vec(),
            weights: path.weights,
            gross: path.gross,
            costs: path.costs,
            net: path.net,
            market,
            risk_free: panel.risk_free().select(Axis(0), days),
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Rows `range` of the ledger.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            dates: self.dates[range.clone()].to_vec(),
            asset_ids: self.asset_ids.clone(),
            weights: self.weights.slice(s![range.clone(), ..]).to_owned(),
            gross: self.gross.slice(s![range.clone()]).to_owned(),
            costs: self.costs.slice(s![range.clone()]).to_owned(),
            net: self.net.slice(s![range.clone()]).to_owned(),
            market: self.market.slice(s![range.clone()]).to_owned(),
            risk_free: self.risk_free.slice(s![range]).to_owned(),
        }
    }

    /// Concatenates consecutive ledgers.
    pub fn concat(parts: &[BacktestLedger]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::contract("no ledgers to concatenate"))?;
        let cat1 = |f: fn(&BacktestLedger) -> &Array1<f64>| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            concatenate(Axis(0), &views).map_err(|e| Error::contract(e.to_string()))
        };
        let views: Vec<_> = parts.iter().map(|p| p.weights.view()).collect();
        Ok(Self {
            dates: parts.iter().flat_map(|p| p.dates.iter().copied()).collect(),
            asset_ids: first.asset_ids.clone(),
            weights: concatenate(Axis(0), &views).map_err(|e| Error::contract(e.to_string()))?,
            gross: cat1(|p| &p.gross)?,
            costs: cat1(|p| &p.costs)?,
            net: cat1(|p| &p.net)?,
            market: cat1(|p| &p.market)?,
            risk_free: cat1(|p| &p.risk_free)?,
        })
    }
}

/// Annualized performance figures; `mu` and `sigma` are in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub sr: f64,
    pub mu: f64,
    pub sigma: f64,
    pub sr_net: f64,
    pub mu_net: f64,
    pub sigma_net: f64,
    pub beta: f64,
    /// A zero variance left some ratio undefined (reported as NaN).
    pub degenerate: bool,
}

struct Annualized {
    sr: f64,
    mu: f64,
    sigma: f64,
    degenerate: bool,
}

fn annualize(r: ArrayView1<'_, f64>, rf: ArrayView1<'_, f64>) -> Annualized {
    let t = r.len() as f64;
    let mean = r.sum() / t;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (t - 1.0);
    let std = var.sqrt();
    let excess = r.iter().zip(rf.iter()).map(|(a, b)| a - b).sum::<f64>() / t;
    let degenerate = !(std > 0.0);
    Annualized {
        mu: 100.0 * TRADING_DAYS * mean,
        sigma: 100.0 * TRADING_DAYS.sqrt() * std,
        sr: if degenerate {
            f64::NAN
        } else {
            TRADING_DAYS.sqrt() * excess / std
        },
        degenerate,
    }
}

/// OLS slope of `portfolio` on `market`; `None` when the market is flat.
pub fn market_beta(portfolio: ArrayView1<'_, f64>, market: ArrayView1<'_, f64>) -> Option<f64> {
    let t = market.len() as f64;
    if market.len() != portfolio.len() || market.len() < 2 {
        return None;
    }
    let mm = market.sum() / t;
    let mp = portfolio.sum() / t;
    let sxx: f64 = market.iter().map(|m| (m - mm) * (m - mm)).sum();
    let sxy: f64 = market.iter().zip(portfolio.iter()).map(|(m, p)| (m - mm) * (p - mp)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// SR, mean and sample volatility (annualized with 252 days) of the gross
/// and net series, and the gross-return market beta.
pub fn annualized_metrics(ledger: &BacktestLedger) -> Result<Metrics> {
    if ledger.len() < 2 {
        return Err(Error::InsufficientHistory {
            needed: 2,
            available: ledger.len(),
        });
    }
    let g = annualize(ledger.gross.view(), ledger.risk_free.view());
    let n = annualize(ledger.net.view(), ledger.risk_free.view());
    let beta = market_beta(ledger.gross.view(), ledger.market.view());
    Ok(Metrics {
        sr: g.sr,
        mu: g.mu,
        sigma: g.sigma,
        sr_net: n.sr,
        mu_net: n.mu,
        sigma_net: n.sigma,
        beta: beta.unwrap_or(f64::NAN),
        degenerate: g.degenerate || n.degenerate || beta.is_none(),
    })
}

/// Metrics of one (model, K, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub k: usize,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Per-seed rows with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean: Metrics,
    pub std: Metrics,
}

fn fields(m: &Metrics) -> [f64; 7] {
    [m.sr, m.mu, m.sigma, m.sr_net, m.mu_net, m.sigma_net, m.beta]
}

fn from_fields(f: [f64; 7], degenerate: bool) -> Metrics {
    Metrics {
        sr: f[0],
        mu: f[1],
        sigma: f[2],
        sr_net: f[3],
        mu_net: f[4],
        sigma_net: f[5],
        beta: f[6],
        degenerate,
    }
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<MetricsRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("metrics report needs at least one row"));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; 7];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(fields(&r.metrics)) {
                *m += v / n;
            }
        }
        let mut std = [0.0; 7];
        if rows.len() > 1 {
            for r in &rows {
                for ((s, v), m) in std.iter_mut().zip(fields(&r.metrics)).zip(mean) {
                    *s += (v - m) * (v - m) / (n - 1.0);
                }
            }
        }
        let degenerate = rows.iter().any(|r| r.metrics.degenerate);
        Ok(Self {
            mean: from_fields(mean, degenerate),
            std: from_fields(std.map(f64::sqrt), degenerate),
            rows,
        })
    }
}

/// Runs the rolling protocol once per configured seed.
pub fn multi_seed(panel: &ReturnPanel, cfg: &RunConfig, class: ModelClass) -> Result<(MetricsReport, Vec<BacktestLedger>)> {
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let c = RunConfig { seed, ..cfg.clone() };
            let run = rolling_protocol(panel, &c, class)?;
            let m = annualized_metrics(&run.ledger)?;
            Ok((
                MetricsRow {
                    model: class.name().to_string(),
                    k: cfg.n_factors,
                    seed,
                    metrics: m,
                },
                run.ledger,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rows, ledgers): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok((MetricsReport::from_rows(rows)?, ledgers))
}

/// Running sum and compounded growth of one unit.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeReturns {
    pub sum: Array1<f64>,
    pub compounded: Array1<f64>,
}

pub fn cumulative_returns(returns: ArrayView1<'_, f64>) -> CumulativeReturns {
    let mut sum = Array1::zeros(returns.len());
    let mut compounded = Array1::zeros(returns.len());
    let (mut s, mut c) = (0.0, 1.0);
    for (i, r) in returns.iter().enumerate() {
        s += r;
        c *= 1.0 + r;
        sum[i] = s;
        compounded[i] = c;
    }
    CumulativeReturns { sum, compounded }
}

/// Metrics with one characteristic group removed (`None` for the baseline).
#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub excluded: Option<String>,
    pub report: MetricsReport,
}

/// Column indices of the characteristics in `group`.
pub fn group_columns(panel: &ReturnPanel, group: &str) -> Vec<usize> {
    (0..panel.n_characteristics())
        .filter(|&c| panel.characteristic_group(c) == group)
        .collect()
}

/// Baseline followed by one rerun of the protocol per dropped group, each
/// over the configured seeds.
pub fn ablate(panel: &ReturnPanel, cfg: &RunConfig, groups: &[String], class: ModelClass) -> Result<Vec<AblationResult>> {
    let mut drops: Vec<(Option<String>, Vec<usize>)> = vec![(None, Vec::new())];
    for g in groups {
        let cols = group_columns(panel, g);
        if cols.is_empty() {
            return Err(Error::Config(format!("unknown characteristic group {g:?}")));
        }
        if cols.len() == panel.n_characteristics() {
            return Err(Error::Config(format!("dropping {g:?} removes every characteristic")));
        }
        drops.push((Some(g.clone()), cols));
    }
    drops
        .into_iter()
        .map(|(name, cols)| {
            let p = if cols.is_empty() {
                panel.clone()
            } else {
                panel.without_characteristics(&cols)
            };
            let (report, _) = multi_seed(&p, cfg, class)?;
            Ok(AblationResult { excluded: name, report })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constituent {
    pub rank: usize,
    pub asset: usize,
    pub asset_id: String,
    pub weight: f64,
}

/// Largest holdings of one factor and their combined weight.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorConstituents {
    pub factor: usize,
    pub members: Vec<Constituent>,
    pub share: f64,
}

/// Top `n` assets by weight of every factor row of `weights` (`K x N`);
/// `n` is clipped to `N`.
pub fn top_constituents(weights: ArrayView2<'_, f64>, asset_ids: &[String], n: usize) -> Result<Vec<FactorConstituents>> {
    if weights.ncols() != asset_ids.len() {
        return Err(Error::contract(format!(
            "{} asset ids for {} weight columns",
            asset_ids.len(),
            weights.ncols()
        )));
    }
    let n = n.min(asset_ids.len());
    Ok(weights
        .outer_iter()
        .enumerate()
        .map(|(k, row)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let members: Vec<Constituent> = order[..n]
                .iter()
                .enumerate()
                .map(|(r, &i)| Constituent {
                    rank: r + 1,
                    asset: i,
                    asset_id: asset_ids[i].clone(),
                    weight: row[i],
                })
                .collect();
            let share = members.iter().map(|m| m.weight).sum();
            FactorConstituents {
                factor: k + 1,
                members,
                share,
            }
        })
        .collect())
}

pub const METRICS_HEADER: &str = "model,K,seed,SR,mu,sigma,SR_net,mu_net,sigma_net,beta";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.model,
            r.k,
            r.seed,
            fields(m).map(fmt_num).join(",")
        );
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path, metrics_csv(rows).as_bytes())
}

pub fn cumulative_csv(dates: &[NaiveDate], cum: &CumulativeReturns) -> String {
    let mut s = String::from("date,sum_return,compounded_return\n");
    for (i, d) in dates.iter().enumerate() {
        let _ = writeln!(s, "{d},{},{}", fmt_num(cum.sum[i]), fmt_num(cum.compounded[i]));
    }
    s
}

pub fn write_cumulative_csv(path: &Path, dates: &[NaiveDate], cum: &CumulativeReturns) -> Result<()> {
    write_atomic(path, cumulative_csv(dates, cum).as_bytes())
}

pub fn constituents_csv(rows: &[(NaiveDate, Vec<FactorConstituents>)]) -> String {
    let mut s = String::from("date,factor,rank,asset_id,weight\n");
    for (date, factors) in rows {
        for f in factors {
            for m in &f.members {
                let _ = writeln!(s, "{date},{},{},{},{}", f.factor, m.rank, m.asset_id, fmt_num(m.weight));
            }
        }
    }
    s
}

pub fn write_constituents_csv(path: &Path, rows: &[(NaiveDate, Vec<FactorConstituents>)]) -> Result<()> {
    write_atomic(path, constituents_csv(rows).as_bytes())
}

/// Daily series followed by one weight column per asset.
pub fn ledger_csv(ledger: &BacktestLedger) -> String {
    let mut s = String::from("date,gross_return,cost,net_return,market_return,rf");
    for id in &ledger.asset_ids {
        let _ = write!(s, ",w_{id}");
    }
    s.push('\n');
    for i in 0..ledger.len() {
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            ledger.dates[i],
            fmt_num(ledger.gross[i]),
            fmt_num(ledger.costs[i]),
            fmt_num(ledger.net[i]),
            fmt_num(ledger.market[i]),
            fmt_num(ledger.risk_free[i])
        );
        for w in ledger.weights.row(i) {
            let _ = write!(s, ",{}", fmt_num(*w));
        }
        s.push('\n');
    }
    s
}

pub fn write_ledger_csv(path: &Path, ledger: &BacktestLedger) -> Result<()> {
    write_atomic(path, ledger_csv(ledger).as_bytes())
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from(
        "excluded,SR,SR_std,mu,sigma,SR_net,SR_net_std,mu_net,sigma_net,beta\n",
    );
    for r in results {
        let (m, sd) = (&r.report.mean, &r.report.std);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.excluded.as_deref().unwrap_or("none"),
            fmt_num(m.sr),
            fmt_num(sd.sr),
            fmt_num(m.mu),
            fmt_num(m.sigma),
            fmt_num(m.sr_net),
            fmt_num(sd.sr_net),
            fmt_num(m.mu_net),
            fmt_num(m.sigma_net),
            fmt_num(m.beta)
        );
    }
    s
}

pub fn write_ablation_csv(path: &Path, results: &[AblationResult]) -> Result<()> {
    write_atomic(path, ablation_csv(results).as_bytes())
}
