use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayD};

use super::RunConfig;
use crate::diffmath::{Graph, Var};
use crate::error::{Error, Result};
use crate::factors::{self, AttentionFactorParams, AttentionVars};
use crate::panel::{FeatureMatrix, ReturnPanel};
use crate::seqmodel::{
    ou_fit, policy_forward, threshold_policy, Dropout, LongConvPolicyParams, Mode, PolicyVars, Position,
};
use crate::trading;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelClass {
    Attention,
    PcaLongConv,
    PcaOu,
}

impl ModelClass {
    pub const ALL: [ModelClass; 3] = [ModelClass::Attention, ModelClass::PcaLongConv, ModelClass::PcaOu];

    pub fn name(self) -> &'static str {
        match self {
            ModelClass::Attention => "attention",
            ModelClass::PcaLongConv => "pca_longconv",
            ModelClass::PcaOu => "pca_ou",
        }
    }

    pub fn uses_pca(self) -> bool {
        !matches!(self, ModelClass::Attention)
    }

    pub fn is_trained(self) -> bool {
        !matches!(self, ModelClass::PcaOu)
    }
}

impl fmt::Display for ModelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelClass::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model class {s:?}")))
    }
}

/// Panel data prepared for one model class.
#[derive(Clone, Debug)]
pub struct MarketData {
    pub class: ModelClass,
    pub returns: Array2<f64>,
    pub risk_free: Array1<f64>,
    /// `T x N x P`, attention only.
    pub features: Option<Array3<f64>>,
    pub feature_names: Vec<String>,
    /// Residual projection formed at each date, PCA classes only.
    pub pca: Option<Vec<Option<Array2<f64>>>>,
    pub lookback: usize,
    pub pca_window: usize,
    pub ou_window: usize,
}

impl MarketData {
    pub fn new(panel: &ReturnPanel, class: ModelClass, cfg: &RunConfig) -> Result<Self> {
        let (features, feature_names, pca) = if class.uses_pca() {
            if cfg.n_factors > panel.n_assets() {
                return Err(Error::Config(format!(
                    "K = {} exceeds the {} assets",
                    cfg.n_factors,
                    panel.n_assets()
                )));
            }
            let proj = factors::rolling_pca_projections(panel.returns(), cfg.pca_window, cfg.n_factors)?;
            (None, Vec::new(), Some(proj))
        } else {
            let fm = FeatureMatrix::from_panel(panel);
            (Some(fm.values), fm.names, None)
        };
        Ok(Self {
            class,
            returns: panel.returns().clone(),
            risk_free: panel.risk_free().clone(),
            features,
            feature_names,
            pca,
            lookback: cfg.lookback,
            pca_window: cfg.pca_window,
            ou_window: cfg.ou_window,
        })
    }

    pub fn n_dates(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }

    /// First date whose weights can be formed from past data alone.
    pub fn first_tradable(&self) -> usize {
        match self.class {
            ModelClass::Attention => self.lookback + 1,
            ModelClass::PcaLongConv => self.pca_window + self.lookback,
            ModelClass::PcaOu => self.pca_window + self.ou_window,
        }
    }

    fn check_days(&self, days: &Range<usize>) -> Result<()> {
        if days.start < self.first_tradable() || days.end > self.n_dates() || days.is_empty() {
            return Err(Error::InsufficientHistory {
                needed: self.first_tradable(),
                available: days.start.min(self.n_dates()),
            });
        }
        Ok(())
    }
}

/// Trainable parameters of a model class.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub attention: Option<AttentionFactorParams>,
    pub policy: Option<LongConvPolicyParams>,
}

impl ModelParams {
    pub fn init(data: &MarketData, cfg: &RunConfig, seed: u64) -> Result<Self> {
        let attention = match data.class {
            ModelClass::Attention => Some(AttentionFactorParams::init(
                &data.feature_names,
                cfg.n_factors,
                cfg.attention_dim,
                cfg.ridge,
                seed,
            )?),
            _ => None,
        };
        let policy = match data.class {
            ModelClass::PcaOu => None,
            _ => Some(LongConvPolicyParams::init(
                cfg.hidden,
                cfg.lookback,
                cfg.layers,
                cfg.dropout,
                cfg.squash,
                seed,
            )?),
        };
        Ok(Self { attention, policy })
    }

    /// Parameter arrays: attention embedding and queries, then the policy.
    pub fn arrays(&self) -> Vec<ArrayD<f64>> {
        let mut out = Vec::new();
        if let Some(a) = &self.attention {
            out.push(a.embedding.clone().into_dyn());
            out.push(a.queries.clone().into_dyn());
        }
        if let Some(p) = &self.policy {
            out.extend(p.arrays());
        }
        out
    }

    pub fn set_arrays(&mut self, arrays: &[ArrayD<f64>]) -> Result<()> {
        let mut rest = arrays;
        if let Some(a) = &mut self.attention {
            if rest.len() < 2 || rest[0].shape() != a.embedding.shape() || rest[1].shape() != a.queries.shape() {
                return Err(Error::contract("attention arrays do not match"));
            }
            a.embedding = rest[0].clone().into_dimensionality().expect("rank 2");
            a.queries = rest[1].clone().into_dimensionality().expect("rank 2");
            rest = &rest[2..];
        }
        if let Some(p) = &mut self.policy {
            p.set_arrays(rest)?;
        } else if !rest.is_empty() {
            return Err(Error::contract("unexpected policy arrays"));
        }
        Ok(())
    }

    /// Per-array weight decay multipliers: policy arrays only.
    pub fn decay_mask(&self, weight_decay: f64) -> Vec<f64> {
        let n_att = if self.attention.is_some() { 2 } else { 0 };
        let n_pol = self.policy.as_ref().map_or(0, |p| p.arrays().len());
        std::iter::repeat_n(0.0, n_att)
            .chain(std::iter::repeat_n(weight_decay, n_pol))
            .collect()
    }
}

pub(crate) struct Vars {
    pub attention: Option<AttentionVars>,
    pub policy: Option<PolicyVars>,
}

impl Vars {
    pub fn new(g: &Graph, p: &ModelParams, trainable: bool) -> Self {
        Self {
            attention: p.attention.as_ref().map(|a| {
                if trainable {
                    AttentionVars::params(g, a)
                } else {
                    AttentionVars::constants(g, a)
                }
            }),
            policy: p.policy.as_ref().map(|q| {
                if trainable {
                    PolicyVars::params(g, q)
                } else {
                    PolicyVars::constants(g, q)
                }
            }),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(a) = &self.attention {
            out.push(a.embedding);
            out.push(a.queries);
        }
        if let Some(p) = &self.policy {
            out.extend(p.all());
        }
        out
    }
}

/// Graph nodes of one forward pass over target days.
pub(crate) struct Forward {
    pub weights: Var,
    pub net: Var,
    pub residuals: Var,
}

fn const_rows(g: &Graph, a: &Array2<f64>, rows: Range<usize>) -> Var {
    g.constant_array(a.slice(s![rows, ..]).to_owned().into_dyn())
}

fn stacked_pca(pca: &[Option<Array2<f64>>], rows: Range<usize>) -> Result<ArrayD<f64>> {
    let mats = pca[rows.clone()]
        .iter()
        .map(|m| {
            m.as_ref().ok_or(Error::InsufficientHistory {
                needed: rows.start + 1,
                available: rows.start,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(factors::stack(&mats))
}

/// Residual projections (and factor weights) for the returns of `rows`,
/// each formed from the previous date.
fn projections(g: &Graph, data: &MarketData, vars: &Vars, ridge: f64, rows: Range<usize>) -> Result<(Var, Option<Var>)> {
    let prev = rows.start - 1..rows.end - 1;
    match (&data.features, &vars.attention, &data.pca) {
        (Some(x), Some(av), _) => {
            let n_p = x.shape()[2];
            let xs = x.slice(s![prev.clone(), .., ..]).to_owned().into_dyn();
            debug_assert_eq!(xs.shape()[2], n_p);
            let xv = g.constant_array(xs);
            let w = factors::attention_weights(g, xv, *av)?;
            let bt = factors::loadings(g, w, ridge)?;
            Ok((factors::residual_projection(g, w, bt)?, Some(w)))
        }
        (_, _, Some(pca)) => Ok((g.constant_array(stacked_pca(pca, prev)?), None)),
        _ => Err(Error::contract("market data does not match the model parameters")),
    }
}

/// Weights and returns for target `days`. Policy histories are the `s`
/// residuals before each day; weights compose with the projection formed the
/// day before.
pub(crate) fn forward(
    g: &Graph,
    data: &MarketData,
    vars: &Vars,
    cfg: &RunConfig,
    days: Range<usize>,
    mode: Mode<'_>,
    allow_degenerate: bool,
    prev: &Array1<f64>,
) -> Result<Forward> {
    data.check_days(&days)?;
    let s = data.lookback;
    let d = days.len();
    let n = data.n_assets();
    let rows = days.start - s..days.end;
    let (proj, _) = projections(g, data, vars, cfg.ridge, rows.clone())?;
    let r_hist = const_rows(g, &data.returns, rows.clone());
    let (eps, _) = factors::apply_projection(g, proj, None, r_hist)?;
    let windows = g.sliding_windows(eps, s)?;
    let windows = g.slice(windows, 0, 0, d)?;
    let hist = g.reshape(windows, &[d * n, s])?;
    let policy = vars
        .policy
        .as_ref()
        .ok_or_else(|| Error::contract("forward needs a policy"))?;
    let port = policy_forward(g, hist, policy, cfg.squash, mode)?;
    let port = g.reshape(port, &[d, n])?;
    let proj_t = g.slice(proj, 0, s, s + d)?;
    let weights = trading::compose(g, proj_t, port, allow_degenerate)?;
    let r_t = const_rows(g, &data.returns, days.clone());
    let gross = trading::gross_returns(g, weights, r_t)?;
    let costs = trading::daily_costs(g, weights, prev.view(), &cfg.cost())?;
    let net = g.sub(gross, costs)?;
    let residuals = g.slice(eps, 0, s, s + d)?;
    Ok(Forward { weights, net, residuals })
}

/// Training loss `−(SR + λ_Var EV)` of a forward pass; the variance term only
/// enters when factor weights are learned.
pub(crate) fn loss(g: &Graph, data: &MarketData, fwd: &Forward, cfg: &RunConfig, days: Range<usize>) -> Result<Var> {
    let rf = data.risk_free.slice(s![days.clone()]);
    let r = data.returns.slice(s![days, ..]);
    let eps = if data.class == ModelClass::Attention {
        Some(fwd.residuals)
    } else {
        None
    };
    trading::objective(g, fwd.net, rf, eps, r, cfg.lambda_var)
}

/// Training loss of `params` over `days` in evaluation mode.
pub fn evaluate_objective(data: &MarketData, params: &ModelParams, cfg: &RunConfig, days: Range<usize>) -> Result<f64> {
    let g = Graph::new();
    let vars = Vars::new(&g, params, false);
    let prev = Array1::zeros(data.n_assets());
    let fwd = forward(&g, data, &vars, cfg, days.clone(), Mode::Eval, false, &prev)?;
    let l = loss(&g, data, &fwd, cfg, days)?;
    Ok(g.scalar(l))
}

/// Loss and gradients for one training step.
pub(crate) fn loss_and_grad(
    data: &MarketData,
    params: &ModelParams,
    cfg: &RunConfig,
    days: Range<usize>,
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, Vec<ArrayD<f64>>)> {
    let g = Graph::new();
    let vars = Vars::new(&g, params, true);
    let prev = Array1::zeros(data.n_assets());
    let mode = match dropout {
        Some(d) => Mode::Train(d),
        None => Mode::Eval,
    };
    let fwd = forward(&g, data, &vars, cfg, days.clone(), mode, false, &prev)?;
    let l = loss(&g, data, &fwd, cfg, days)?;
    let grads = g.grad(l, &vars.all())?;
    Ok((g.scalar(l), grads.into_iter().map(|t| t.into_array()).collect()))
}

/// Frozen out-of-sample weights for `days` (`D x N`). Days whose raw weights
/// vanish hold no position.
pub fn oos_weights(data: &MarketData, params: &ModelParams, cfg: &RunConfig, days: Range<usize>) -> Result<Array2<f64>> {
    if data.class == ModelClass::PcaOu {
        return ou_weights(data, cfg, days);
    }
    let g = Graph::new();
    let vars = Vars::new(&g, params, false);
    let prev = Array1::zeros(data.n_assets());
    let fwd = forward(&g, data, &vars, cfg, days, Mode::Eval, true, &prev)?;
    let w = g.value(fwd.weights).into_array();
    Ok(w.into_dimensionality().expect("rank 2"))
}

/// Factor weights (`K x N`) applied to the returns of `day`.
pub fn factor_weights_at(data: &MarketData, params: &ModelParams, day: usize) -> Result<Array2<f64>> {
    match (&data.features, &params.attention) {
        (Some(x), Some(a)) => {
            if day == 0 || day >= data.n_dates() {
                return Err(Error::InsufficientHistory { needed: 1, available: day });
            }
            factors::attention_weights_value(x.slice(s![day - 1, .., ..]), a)
        }
        _ => Err(Error::Config("factor weights need the attention model".into())),
    }
}

/// PCA residuals `ε_t = ω_ε,t−1 R_t`; rows without a projection are `None`.
fn pca_residuals(data: &MarketData) -> Result<Vec<Option<Array1<f64>>>> {
    let pca = data.pca.as_ref().ok_or_else(|| Error::contract("OU weights need PCA projections"))?;
    let mut out = vec![None; data.n_dates()];
    for t in 1..data.n_dates() {
        if let Some(p) = &pca[t - 1] {
            out[t] = Some(p.dot(&data.returns.row(t)));
        }
    }
    Ok(out)
}

/// OU threshold positions composed through the PCA residual projection.
///
/// Position state is carried from the first tradable date through `days`, so
/// the weights on a day depend only on earlier data.
fn ou_weights(data: &MarketData, cfg: &RunConfig, days: Range<usize>) -> Result<Array2<f64>> {
    data.check_days(&days)?;
    let eps = pca_residuals(data)?;
    let pca = data.pca.as_ref().expect("checked");
    let (n, w) = (data.n_assets(), data.ou_window);
    let th = cfg.thresholds();
    let mut positions = vec![Position::Flat; n];
    let mut out = Array2::zeros((days.len(), n));
    let mut cum = vec![0.0; w];
    for t in data.first_tradable()..days.end {
        for (i, pos) in positions.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, tau) in (t - w..t).enumerate() {
                acc += eps[tau].as_ref().expect("PCA history checked")[i];
                cum[j] = acc;
            }
            *pos = match ou_fit(&cum) {
                Ok(fit) => threshold_policy(&fit, *pos, &th),
                Err(_) => Position::Flat,
            };
        }
        if t >= days.start {
            let port = Array1::from_iter(positions.iter().map(|p| p.weight()));
            let proj = pca[t - 1].as_ref().expect("PCA history checked");
            if let Ok(wt) = trading::compose_weights(proj.view(), port.view()) {
                out.row_mut(t - days.start).assign(&wt);
            }
        }
    }
    Ok(out)
}
