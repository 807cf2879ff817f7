use std::ops::Range;

use ndarray::{s, Array1};
use rand::seq::SliceRandom;
use rand::Rng;

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::model::{evaluate_objective, loss_and_grad, oos_weights, MarketData, ModelClass, ModelParams};
use super::RunConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::seqmodel::Dropout;
use crate::trading::{sharpe_value, PortfolioPath};

/// Shortest span a model is trained on.
pub const MIN_TRAIN_DAYS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub params: ModelParams,
    /// Objective over the whole training span before the first update.
    pub initial_objective: Option<f64>,
    /// Mean mini-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Objective over the whole training span after each epoch, when tracked.
    pub epoch_objectives: Vec<f64>,
    pub steps: usize,
}

/// Trains fresh parameters on the target days in `train`.
///
/// Each epoch splits the span into contiguous batches of `batch_days` at a
/// random phase and visits them in random order.
pub fn fit_window(data: &MarketData, train: Range<usize>, cfg: &RunConfig, seed: u64) -> Result<FitReport> {
    fit_window_tracked(data, train, cfg, seed, false)
}

/// [`fit_window`], optionally recording the full-span objective per epoch.
pub fn fit_window_tracked(
    data: &MarketData,
    train: Range<usize>,
    cfg: &RunConfig,
    seed: u64,
    track_objective: bool,
) -> Result<FitReport> {
    cfg.validate()?;
    let start = train.start.max(data.first_tradable());
    let end = train.end.min(data.n_dates());
    if end < start + MIN_TRAIN_DAYS {
        return Err(Error::InsufficientHistory {
            needed: data.first_tradable() + MIN_TRAIN_DAYS,
            available: end,
        });
    }
    let span = start..end;
    let mut params = ModelParams::init(data, cfg, seed)?;
    if !data.class.is_trained() {
        return Ok(FitReport {
            params,
            initial_objective: None,
            epoch_losses: Vec::new(),
            epoch_objectives: Vec::new(),
            steps: 0,
        });
    }
    let initial = evaluate_objective(data, &params, cfg, span.clone())?;

    let len = cfg.batch_days.min(span.len());
    let mut batch_rng = rng::stream(seed, &format!("batch:{}", train.start));
    let mut dropout_rng = rng::stream(seed, &format!("dropout:{}", train.start));
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    let decay = params.decay_mask(cfg.weight_decay);
    let mut arrays = params.arrays();
    let mut state = OptimizerState::new(&arrays);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_objectives = Vec::new();
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let slack = span.len() - len;
        let phase = if slack == 0 { 0 } else { batch_rng.random_range(0..=slack.min(len - 1)) };
        let mut batches: Vec<Range<usize>> = Vec::new();
        let mut b = span.start + phase;
        while b + len <= span.end {
            batches.push(b..b + len);
            b += len;
        }
        if batches.is_empty() {
            batches.push(span.clone());
        }
        batches.shuffle(&mut batch_rng);
        let mut total = 0.0;
        for days in &batches {
            let dropout = (cfg.dropout > 0.0).then(|| Dropout {
                rate: cfg.dropout,
                rng: &mut dropout_rng,
            });
            let (l, grads) = loss_and_grad(data, &params, cfg, days.clone(), dropout).map_err(|e| match e {
                Error::NonFinite(m) => Error::TrainingDiverged {
                    epoch,
                    step: state.step as usize + 1,
                    msg: m,
                },
                other => other,
            })?;
            adam_step(&mut arrays, &grads, &mut state, &adam, &decay)?;
            params.set_arrays(&arrays)?;
            total += l;
        }
        epoch_losses.push(total / batches.len() as f64);
        if track_objective {
            epoch_objectives.push(evaluate_objective(data, &params, cfg, span.clone())?);
        }
    }
    Ok(FitReport {
        params,
        initial_objective: Some(initial),
        epoch_losses,
        epoch_objectives,
        steps: state.step as usize,
    })
}

/// Daily net Sharpe ratio of frozen weights over `days`.
pub fn validation_sharpe(data: &MarketData, params: &ModelParams, cfg: &RunConfig, days: Range<usize>) -> Result<f64> {
    let w = oos_weights(data, params, cfg, days.clone())?;
    let path = PortfolioPath::new(w, data.returns.slice(s![days.clone(), ..]), None, &cfg.cost())?;
    let rf: Array1<f64> = data.risk_free.slice(s![days]).to_owned();
    sharpe_value(path.net.view(), rf.view())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningScore {
    pub lambda_var: f64,
    pub learning_rate: f64,
    pub validation_sharpe: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningReport {
    pub scores: Vec<TuningScore>,
    pub selected: usize,
}

/// Trains every tuning candidate on `fit` and keeps the one with the best
/// validation net Sharpe ratio on `valid` (first best on ties).
pub fn select_tuning(
    data: &MarketData,
    fit: Range<usize>,
    valid: Range<usize>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(RunConfig, TuningReport)> {
    let candidates = cfg.tuning_candidates();
    if candidates.len() == 1 || data.class == ModelClass::PcaOu {
        return Ok((
            cfg.clone(),
            TuningReport {
                scores: Vec::new(),
                selected: 0,
            },
        ));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let report = fit_window(data, fit.clone(), c, seed)?;
        let sr = validation_sharpe(data, &report.params, c, valid.clone())?;
        scores.push(TuningScore {
            lambda_var: c.lambda_var,
            learning_rate: c.learning_rate,
            validation_sharpe: sr,
        });
    }
    let mut selected = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.validation_sharpe > scores[selected].validation_sharpe {
            selected = i;
        }
    }
    Ok((candidates[selected].clone(), TuningReport { scores, selected }))
}
