//! Portfolio composition, trading costs, net returns, and the training
//! objective.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, IxDyn};

use crate::diffmath::{Graph, Var};
use crate::error::{Error, Result};

/// Raw weights with a smaller L1 norm than this are degenerate.
pub const WEIGHT_TOL: f64 = 1e-12;
/// Standard-deviation guard of the training Sharpe ratio.
pub const SHARPE_GUARD: f64 = 1e-8;

/// Proportional trading and shorting costs per unit of weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub transaction: f64,
    pub short: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            transaction: 0.0005,
            short: 0.0001,
        }
    }
}

/// Daily asset weights and the returns they earn.
#[derive(Clone, Debug, PartialEq)]
pub struct PortfolioPath {
    /// `T x N`.
    pub weights: Array2<f64>,
    pub gross: Array1<f64>,
    pub costs: Array1<f64>,
    pub net: Array1<f64>,
}

impl PortfolioPath {
    /// Gross returns `ω_t · R_t` and costs against the previous row (or
    /// `prev` before the first row; zero weights when `None`).
    pub fn new(
        weights: Array2<f64>,
        returns: ArrayView2<'_, f64>,
        prev: Option<ArrayView1<'_, f64>>,
        cost: &CostModel,
    ) -> Result<Self> {
        if weights.dim() != returns.dim() {
            return Err(Error::contract(format!(
                "weights {:?} and returns {:?} differ",
                weights.dim(),
                returns.dim()
            )));
        }
        let n = weights.ncols();
        let mut last = match prev {
            Some(p) if p.len() == n => p.to_owned(),
            Some(p) => {
                return Err(Error::contract(format!("prev weights have {} assets, not {n}", p.len())))
            }
            None => Array1::zeros(n),
        };
        let t = weights.nrows();
        let mut gross = Array1::zeros(t);
        let mut costs = Array1::zeros(t);
        for d in 0..t {
            let w = weights.row(d);
            gross[d] = w.dot(&returns.row(d));
            costs[d] = transaction_cost(w, last.view(), cost);
            last.assign(&w);
        }
        let net = &gross - &costs;
        Ok(Self {
            weights,
            gross,
            costs,
            net,
        })
    }
}

/// `(ω_εᵀ ω_port) / ‖ω_εᵀ ω_port‖₁`.
pub fn compose_weights(projection: ArrayView2<'_, f64>, port: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if projection.nrows() != port.len() || projection.ncols() != port.len() {
        return Err(Error::contract(format!(
            "projection {:?} does not match {} assets",
            projection.dim(),
            port.len()
        )));
    }
    let raw = projection.t().dot(&port);
    let norm: f64 = raw.iter().map(|v| v.abs()).sum();
    if !(norm > WEIGHT_TOL) {
        return Err(Error::DegeneratePortfolio(norm));
    }
    Ok(raw / norm)
}

/// Batched [`compose_weights`]: projections `D x N x N`, raw policy weights
/// `D x N`. With `allow_degenerate`, days whose raw weights vanish get zero
/// weights instead of an error.
pub fn compose(g: &Graph, projection: Var, port: Var, allow_degenerate: bool) -> Result<Var> {
    let ps = g.shape(port);
    let js = g.shape(projection);
    if ps.len() != 2 || js != [ps[0], ps[1], ps[1]] {
        return Err(Error::contract(format!(
            "compose: projection {js:?}, policy weights {ps:?}"
        )));
    }
    let (d, n) = (ps[0], ps[1]);
    let pt = g.transpose(projection)?;
    let p3 = g.reshape(port, &[d, n, 1])?;
    let raw = g.matmul(pt, p3)?;
    let raw = g.reshape(raw, &[d, n])?;
    let abs = g.abs(raw)?;
    let norm = g.sum_axis(abs, 1)?;
    let norm_v = g.array(norm).clone();
    let mut pad = ArrayD::zeros(IxDyn(&[d, 1]));
    for (day, &v) in norm_v.iter().enumerate() {
        if !(v > WEIGHT_TOL) {
            if !allow_degenerate {
                return Err(Error::DegeneratePortfolio(v));
            }
            pad[[day, 0]] = 1.0;
        }
    }
    let norm = if pad.iter().any(|&v| v != 0.0) {
        let p = g.constant_array(pad);
        g.add(norm, p)?
    } else {
        norm
    };
    g.div(raw, norm)
}

/// `c_tc ‖ω_t − ω_prev‖₁ + c_short ‖max(−ω_t, 0)‖₁`.
pub fn transaction_cost(w: ArrayView1<'_, f64>, prev: ArrayView1<'_, f64>, cost: &CostModel) -> f64 {
    let turnover: f64 = w.iter().zip(prev.iter()).map(|(a, b)| (a - b).abs()).sum();
    let short: f64 = w.iter().map(|&a| (-a).max(0.0)).sum();
    cost.transaction * turnover + cost.short * short
}

/// Daily costs `D` of weights `D x N`, the first row compared with `prev`.
pub fn daily_costs(g: &Graph, weights: Var, prev: ArrayView1<'_, f64>, cost: &CostModel) -> Result<Var> {
    let s = g.shape(weights);
    if s.len() != 2 || s[1] != prev.len() {
        return Err(Error::contract(format!(
            "daily_costs: weights {s:?}, prev {}",
            prev.len()
        )));
    }
    let (d, n) = (s[0], s[1]);
    let first = g.constant_array(prev.to_owned().into_shape_with_order((1, n)).expect("row").into_dyn());
    let lagged = if d > 1 {
        let head = g.slice(weights, 0, 0, d - 1)?;
        g.concat(&[first, head], 0)?
    } else {
        first
    };
    let diff = g.sub(weights, lagged)?;
    let diff = g.abs(diff)?;
    let turnover = g.sum_axis(diff, 1)?;
    let neg = g.neg(weights)?;
    let shorts = g.relu(neg)?;
    let shorts = g.sum_axis(shorts, 1)?;
    let a = g.scale(turnover, cost.transaction)?;
    let b = g.scale(shorts, cost.short)?;
    let total = g.add(a, b)?;
    g.reshape(total, &[d])
}

/// Per-day portfolio returns `sum_i ω_ti R_ti` for weights and returns `D x N`.
pub fn gross_returns(g: &Graph, weights: Var, returns: Var) -> Result<Var> {
    let prod = g.mul(weights, returns)?;
    let s = g.sum_axis(prod, 1)?;
    let d = g.shape(weights)[0];
    g.reshape(s, &[d])
}

fn return_variances(returns: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let t = returns.nrows();
    if t == 0 {
        return Err(Error::DegenerateInput("empty return window".into()));
    }
    let mean = returns.mean_axis(Axis(0)).expect("nonempty");
    let var = returns
        .axis_iter(Axis(1))
        .zip(mean.iter())
        .map(|(col, m)| col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t as f64)
        .collect::<Array1<f64>>();
    if let Some(i) = var.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateInput(format!("asset {i} has zero return variance")));
    }
    Ok(var)
}

/// `1 - mean_i Var(ε_i) / Var(R_i)` with `1/T` variances; residuals `T x N`.
pub fn explained_variance(g: &Graph, residuals: Var, returns: ArrayView2<'_, f64>) -> Result<Var> {
    let s = g.shape(residuals);
    if s != [returns.nrows(), returns.ncols()] {
        return Err(Error::contract(format!(
            "residuals {s:?} and returns {:?} differ",
            returns.dim()
        )));
    }
    let var_r = return_variances(returns)?;
    let mean = g.mean_axis(residuals, 0)?;
    let centered = g.sub(residuals, mean)?;
    let sq = g.square(centered)?;
    let var_e = g.mean_axis(sq, 0)?;
    let inv = g.constant_array(var_r.mapv(|v| 1.0 / v).into_shape_with_order((1, s[1])).expect("row").into_dyn());
    let ratio = g.mul(var_e, inv)?;
    let avg = g.mean(ratio)?;
    let neg = g.neg(avg)?;
    g.add_scalar(neg, 1.0)
}

/// [`explained_variance`] on plain arrays.
pub fn explained_variance_value(residuals: ArrayView2<'_, f64>, returns: ArrayView2<'_, f64>) -> Result<f64> {
    let g = Graph::new();
    let e = g.constant_array(residuals.to_owned().into_dyn());
    let v = explained_variance(&g, e, returns)?;
    Ok(g.scalar(v))
}

/// Daily net Sharpe ratio with population variance and the training guard:
/// `(mean(r) − mean(rf)) / sqrt(Var(r) + SHARPE_GUARD²)`.
pub fn sharpe(g: &Graph, net: Var, rf: ArrayView1<'_, f64>) -> Result<Var> {
    let s = g.shape(net);
    if s.len() != 1 || s[0] != rf.len() {
        return Err(Error::contract(format!("sharpe: returns {s:?}, rf {}", rf.len())));
    }
    if s[0] < 2 {
        return Err(Error::InsufficientHistory {
            needed: 2,
            available: s[0],
        });
    }
    let mean = g.mean(net)?;
    let centered = g.sub(net, mean)?;
    let sq = g.square(centered)?;
    let var = g.mean(sq)?;
    let var = g.add_scalar(var, SHARPE_GUARD * SHARPE_GUARD)?;
    let std = g.sqrt(var)?;
    let rf = g.constant_array(rf.to_owned().into_dyn());
    let excess = g.sub(net, rf)?;
    let excess = g.mean(excess)?;
    g.div(excess, std)
}

/// [`sharpe`] on plain arrays.
pub fn sharpe_value(net: ArrayView1<'_, f64>, rf: ArrayView1<'_, f64>) -> Result<f64> {
    let g = Graph::new();
    let r = g.constant_array(net.to_owned().into_dyn());
    let v = sharpe(&g, r, rf)?;
    Ok(g.scalar(v))
}

/// `−(SR + λ_Var · EV)`; the variance term is skipped when `residuals` is `None`.
pub fn objective(
    g: &Graph,
    net: Var,
    rf: ArrayView1<'_, f64>,
    residuals: Option<Var>,
    returns: ArrayView2<'_, f64>,
    lambda_var: f64,
) -> Result<Var> {
    let sr = sharpe(g, net, rf)?;
    let total = match residuals {
        Some(e) if lambda_var != 0.0 => {
            let ev = explained_variance(g, e, returns)?;
            let ev = g.scale(ev, lambda_var)?;
            g.add(sr, ev)?
        }
        _ => sr,
    };
    g.neg(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn compose_example() {
        let proj = array![[0.5, -0.5], [-0.5, 0.5]];
        let w = compose_weights(proj.view(), array![1.0, 0.0].view()).unwrap();
        assert_eq!(w, array![0.5, -0.5]);
        assert!(matches!(
            compose_weights(proj.view(), array![0.0, 0.0].view()),
            Err(Error::DegeneratePortfolio(_))
        ));
    }

    #[test]
    fn batched_compose_zeroes_degenerate_days() {
        let g = Graph::new();
        let proj = g.constant_array(ArrayD::from_shape_fn(IxDyn(&[2, 2, 2]), |i| if i[1] == i[2] { 1.0 } else { 0.0 }));
        let port = g.constant_array(array![[2.0, -2.0], [0.0, 0.0]].into_dyn());
        assert!(matches!(compose(&g, proj, port, false), Err(Error::DegeneratePortfolio(_))));
        let w = compose(&g, proj, port, true).unwrap();
        assert_eq!(g.value(w).values(), &[0.5, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn cost_examples() {
        let c = CostModel::default();
        let z = array![0.0, 0.0];
        assert!((transaction_cost(array![0.5, -0.5].view(), z.view(), &c) - 0.00055).abs() < 1e-15);
        assert!((transaction_cost(array![0.0, 1.0].view(), array![1.0, 0.0].view(), &c) - 0.001).abs() < 1e-15);
        let w = array![0.3, 0.7];
        assert_eq!(transaction_cost(w.view(), w.view(), &c), 0.0);
    }

    #[test]
    fn graph_costs_match_plain() {
        let c = CostModel::default();
        let w = array![[0.5, -0.5], [0.2, 0.8], [-1.0, 0.0]];
        let prev = array![0.1, 0.9];
        let g = Graph::new();
        let wv = g.constant_array(w.clone().into_dyn());
        let costs = daily_costs(&g, wv, prev.view(), &c).unwrap();
        let path = PortfolioPath::new(w, Array2::zeros((3, 2)).view(), Some(prev.view()), &c).unwrap();
        for (a, b) in g.value(costs).values().iter().zip(path.costs.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn explained_variance_examples() {
        let r = array![[0.01, -0.02], [0.03, 0.01], [-0.01, 0.02], [0.0, 0.0]];
        assert!(explained_variance_value(r.view(), r.view()).unwrap().abs() < 1e-15);
        let zeros = Array2::zeros((4, 2));
        assert!((explained_variance_value(zeros.view(), r.view()).unwrap() - 1.0).abs() < 1e-15);
        let half = &r * 0.5;
        assert!((explained_variance_value(half.view(), r.view()).unwrap() - 0.75).abs() < 1e-12);
        let flat = array![[0.01, 0.0], [0.02, 0.0]];
        assert!(matches!(
            explained_variance_value(flat.view(), flat.view()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn sharpe_examples() {
        let sr = sharpe_value(array![0.01, 0.02, 0.03].view(), array![0.0, 0.0, 0.0].view()).unwrap();
        assert!((sr - 0.02 / (2e-4_f64 / 3.0).sqrt()).abs() < 1e-6);
        assert!((sr - 2.4495).abs() < 1e-4);
        let flat = sharpe_value(array![0.01, 0.01, 0.01].view(), array![0.01, 0.01, 0.01].view()).unwrap();
        assert!(flat.abs() < 1e-12);
    }

    #[test]
    fn objective_with_zero_residuals() {
        let g = Graph::new();
        let net = g.constant_array(array![0.01, 0.01, 0.01].into_dyn());
        let rf = Array1::zeros(3);
        let r = array![[0.01, -0.01], [0.02, 0.0], [0.0, 0.03]];
        let e = g.constant_array(Array2::<f64>::zeros((3, 2)).into_dyn());
        let loss = objective(&g, net, rf.view(), Some(e), r.view(), 100.0).unwrap();
        let guarded = 0.01 / SHARPE_GUARD;
        assert!((g.scalar(loss) + (guarded + 100.0)).abs() < 1e-6 * guarded);
    }
}
