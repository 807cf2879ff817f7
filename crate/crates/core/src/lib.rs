//! Attention factor portfolios and long-convolution residual trading.
//!
//! The crate learns conditional factor portfolios from firm characteristics
//! jointly with a convolutional policy on factor residuals, by maximizing a
//! net-of-cost Sharpe ratio plus an explained-variance term. PCA factor and
//! Ornstein-Uhlenbeck threshold baselines are evaluated under the same
//! rolling out-of-sample protocol.

pub mod backtest;
pub mod diffmath;
pub mod error;
pub mod factors;
pub mod io;
pub mod panel;
pub mod rng;
pub mod seqmodel;
pub mod trading;
pub mod train;

pub use error::{Error, Result};
