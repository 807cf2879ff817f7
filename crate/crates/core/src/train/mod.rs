//! Optimization and the rolling out-of-sample estimation protocol.

mod adam;
mod config;
mod fit;
mod model;
mod protocol;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use config::RunConfig;
pub use fit::{
    fit_window, fit_window_tracked, select_tuning, validation_sharpe, FitReport, TuningReport, TuningScore,
    MIN_TRAIN_DAYS,
};
pub use model::{evaluate_objective, factor_weights_at, oos_weights, MarketData, ModelClass, ModelParams};
pub use protocol::{rolling_protocol, rolling_protocol_on, rolling_windows, ProtocolRun, Window, WindowResult};

/// Objective value and gradients with respect to every parameter array of
/// `params` over `days`, without dropout.
pub fn objective_gradient(
    data: &MarketData,
    params: &ModelParams,
    cfg: &RunConfig,
    days: std::ops::Range<usize>,
) -> crate::Result<(f64, Vec<ndarray::ArrayD<f64>>)> {
    model::loss_and_grad(data, params, cfg, days, None)
}
