use std::ops::Range;

use chrono::{Datelike, NaiveDate};
use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;

use super::fit::{fit_window, select_tuning, FitReport, TuningReport};
use super::model::{oos_weights, MarketData, ModelClass, ModelParams};
use super::RunConfig;
use crate::backtest::BacktestLedger;
use crate::error::{Error, Result};
use crate::panel::ReturnPanel;

/// One retraining step: train on `train`, trade `test` out of sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    /// First calendar year traded.
    pub year: i32,
    pub train: Range<usize>,
    pub test: Range<usize>,
}

fn days_in_years(dates: &[NaiveDate], years: Range<i32>) -> Range<usize> {
    let start = dates.partition_point(|d| d.year() < years.start);
    let end = dates.partition_point(|d| d.year() < years.end);
    start..end
}

/// Calendar-year windows: each evaluation block of `retrain_years` years is
/// preceded by `train_years` full years of training data.
pub fn rolling_windows(dates: &[NaiveDate], cfg: &RunConfig) -> Result<Vec<Window>> {
    let (first, last) = match (dates.first(), dates.last()) {
        (Some(a), Some(b)) => (a.year(), b.year()),
        _ => {
            return Err(Error::InsufficientHistory {
                needed: cfg.train_years + 1,
                available: 0,
            })
        }
    };
    let train_years = cfg.train_years as i32;
    let cadence = cfg.retrain_years as i32;
    let mut out = Vec::new();
    let mut y = first + train_years;
    while y <= last {
        out.push(Window {
            year: y,
            train: days_in_years(dates, y - train_years..y),
            test: days_in_years(dates, y..y + cadence),
        });
        y += cadence;
    }
    if out.is_empty() {
        return Err(Error::InsufficientHistory {
            needed: cfg.train_years + 1,
            available: (last - first + 1) as usize,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct WindowResult {
    pub window: Window,
    /// Out-of-sample days actually traded.
    pub traded: Range<usize>,
    pub fit: FitReport,
}

impl WindowResult {
    pub fn params(&self) -> &ModelParams {
        &self.fit.params
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub class: ModelClass,
    /// Configuration after tuning.
    pub config: RunConfig,
    pub ledger: BacktestLedger,
    pub windows: Vec<WindowResult>,
    pub tuning: TuningReport,
}

/// Rolling out-of-sample run on a panel.
pub fn rolling_protocol(panel: &ReturnPanel, cfg: &RunConfig, class: ModelClass) -> Result<ProtocolRun> {
    cfg.validate()?;
    let data = MarketData::new(panel, class, cfg)?;
    rolling_protocol_on(panel, &data, cfg)
}

/// [`rolling_protocol`] with prepared market data.
pub fn rolling_protocol_on(panel: &ReturnPanel, data: &MarketData, cfg: &RunConfig) -> Result<ProtocolRun> {
    let dates = panel.dates();
    let windows = rolling_windows(dates, cfg)?;
    let seed = cfg.seed;

    let first = &windows[0];
    let train_end_year = first.year;
    let valid = days_in_years(dates, train_end_year - cfg.validation_years as i32..train_end_year);
    let fit_days = first.train.start..valid.start;
    let (tuned, tuning) = if cfg.tuning_candidates().len() > 1 && class_trains(data) {
        select_tuning(data, fit_days, valid, cfg, seed)?
    } else {
        (
            cfg.clone(),
            TuningReport {
                scores: Vec::new(),
                selected: 0,
            },
        )
    };

    let tradable = data.first_tradable();
    let results: Vec<(WindowResult, Array2<f64>)> = windows
        .par_iter()
        .filter_map(|w| {
            let traded = w.test.start.max(tradable)..w.test.end;
            if traded.is_empty() {
                return None;
            }
            Some((w, traded))
        })
        .map(|(w, traded)| {
            let fit = fit_window(data, w.train.clone(), &tuned, seed)?;
            let weights = oos_weights(data, &fit.params, &tuned, traded.clone())?;
            Ok((
                WindowResult {
                    window: w.clone(),
                    traded,
                    fit,
                },
                weights,
            ))
        })
        .collect::<Result<_>>()?;
    if results.is_empty() {
        return Err(Error::InsufficientHistory {
            needed: tradable + 1,
            available: panel.n_dates(),
        });
    }

    let days: Vec<usize> = results.iter().flat_map(|(r, _)| r.traded.clone()).collect();
    let views: Vec<_> = results.iter().map(|(_, w)| w.view()).collect();
    let weights = concatenate(Axis(0), &views).map_err(|e| Error::contract(e.to_string()))?;
    let ledger = BacktestLedger::from_weights(panel, &days, weights, &tuned.cost())?;
    Ok(ProtocolRun {
        class: data.class,
        config: tuned,
        ledger,
        windows: results.into_iter().map(|(r, _)| r).collect(),
        tuning,
    })
}

fn class_trains(data: &MarketData) -> bool {
    data.class.is_trained()
}
