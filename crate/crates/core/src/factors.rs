//! Factor portfolio weights, ridge loadings, and residual projections.
//!
//! Factor weights `ω_F` (`K x N`) define tradable factors `F_t = ω_F R_t`.
//! Loadings follow from the weights as `βᵀ = ω_Fᵀ (ω_F ω_Fᵀ + λ I)⁻¹` and the
//! residual portfolios are `ε_t = (I - βᵀ ω_F) R_t`. Weights applied to the
//! returns of date `t` are always built from information dated `t - 1`.

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffmath::{symmetric_eigendecomposition, Graph, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Embedding, queries, and ridge strength of the attention factors.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionFactorParams {
    /// `P x d_x`.
    pub embedding: Array2<f64>,
    /// `K x d_x`.
    pub queries: Array2<f64>,
    pub ridge: f64,
}

impl AttentionFactorParams {
    /// Gaussian initialization with standard deviation `1/sqrt(d_x)`.
    ///
    /// Each embedding row draws from a stream keyed by its feature name, so
    /// removing features leaves the remaining rows unchanged.
    pub fn init(
        feature_names: &[String],
        n_factors: usize,
        attention_dim: usize,
        ridge: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_factors == 0 || attention_dim == 0 || feature_names.is_empty() {
            return Err(Error::Config(
                "attention factors need K >= 1, d_x >= 1 and at least one feature".into(),
            ));
        }
        if !(ridge >= 0.0) {
            return Err(Error::Config("ridge must be nonnegative".into()));
        }
        let std = 1.0 / (attention_dim as f64).sqrt();
        let mut embedding = Array2::zeros((feature_names.len(), attention_dim));
        for (p, name) in feature_names.iter().enumerate() {
            let mut r = rng::stream(seed, &format!("init:embedding:{name}"));
            for x in 0..attention_dim {
                let z: f64 = r.sample(StandardNormal);
                embedding[[p, x]] = std * z;
            }
        }
        let mut r = rng::stream(seed, "init:queries");
        let queries = Array2::from_shape_simple_fn((n_factors, attention_dim), || {
            let z: f64 = r.sample(StandardNormal);
            std * z
        });
        Ok(Self {
            embedding,
            queries,
            ridge,
        })
    }

    pub fn n_factors(&self) -> usize {
        self.queries.nrows()
    }

    pub fn attention_dim(&self) -> usize {
        self.queries.ncols()
    }
}

/// Graph handles for attention parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub embedding: Var,
    pub queries: Var,
}

impl AttentionVars {
    pub fn params(g: &Graph, p: &AttentionFactorParams) -> Self {
        Self {
            embedding: g.param_array(p.embedding.clone().into_dyn()),
            queries: g.param_array(p.queries.clone().into_dyn()),
        }
    }

    pub fn constants(g: &Graph, p: &AttentionFactorParams) -> Self {
        Self {
            embedding: g.constant_array(p.embedding.clone().into_dyn()),
            queries: g.constant_array(p.queries.clone().into_dyn()),
        }
    }
}

/// Row softmax of `Q (X W_K)ᵀ / sqrt(d_x)`.
///
/// `features` is `N x P` or `D x N x P`; the result is `K x N` or `D x K x N`.
pub fn attention_weights(g: &Graph, features: Var, vars: AttentionVars) -> Result<Var> {
    let dx = g.shape(vars.queries)[1];
    let embedded = g.matmul(features, vars.embedding)?;
    let qt = g.transpose(vars.queries)?;
    let logits_nk = g.matmul(embedded, qt)?;
    let logits = g.transpose(logits_nk)?;
    let scaled = g.scale(logits, 1.0 / (dx as f64).sqrt())?;
    g.softmax(scaled)
}

/// `βᵀ = ω_Fᵀ (ω_F ω_Fᵀ + λ I)⁻¹`, shape `N x K` (or batched `D x N x K`).
pub fn loadings(g: &Graph, weights: Var, ridge: f64) -> Result<Var> {
    if !(ridge >= 0.0) {
        return Err(Error::contract(format!("ridge {ridge} must be nonnegative")));
    }
    let shape = g.shape(weights);
    let k = shape[shape.len() - 2];
    let wt = g.transpose(weights)?;
    let gram = g.matmul(weights, wt)?;
    let gram = if ridge > 0.0 {
        let eye = g.constant_array((Array2::<f64>::eye(k) * ridge).into_dyn());
        g.add(gram, eye)?
    } else {
        gram
    };
    // The Gram matrix is symmetric, so β = G⁻¹ ω_F and βᵀ = ω_Fᵀ G⁻¹.
    let beta = g.sym_solve(gram, weights)?;
    g.transpose(beta)
}

/// `ω_ε = I_N - βᵀ ω_F`.
pub fn residual_projection(g: &Graph, weights: Var, loadings_t: Var) -> Result<Var> {
    let shape = g.shape(weights);
    let n = shape[shape.len() - 1];
    let eye = g.constant_array(Array2::<f64>::eye(n).into_dyn());
    let absorbed = g.matmul(loadings_t, weights)?;
    g.sub(eye, absorbed)
}

/// Applies per-date projections (`D x N x N`) and weights (`D x K x N`) to
/// returns (`D x N`) of the same rows; returns `(residuals D x N, factors D x K)`.
///
/// Row `d` of the projections must have been formed before the returns of row `d`.
pub fn apply_projection(
    g: &Graph,
    projection: Var,
    weights: Option<Var>,
    returns: Var,
) -> Result<(Var, Option<Var>)> {
    let rs = g.shape(returns);
    let ps = g.shape(projection);
    if rs.len() != 2 || ps.len() != 3 || ps[0] != rs[0] || ps[1] != rs[1] {
        return Err(Error::contract(format!(
            "projection {ps:?} does not align with returns {rs:?}"
        )));
    }
    let r3 = g.reshape(returns, &[rs[0], rs[1], 1])?;
    let eps = g.matmul(projection, r3)?;
    let eps = g.reshape(eps, &[rs[0], rs[1]])?;
    let factors = match weights {
        Some(w) => {
            let k = g.shape(w)[1];
            let f = g.matmul(w, r3)?;
            Some(g.reshape(f, &[rs[0], k])?)
        }
        None => None,
    };
    Ok((eps, factors))
}

/// Factor weights, loadings, and projection at one date.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorDecomposition {
    /// `K x N`.
    pub factor_weights: Array2<f64>,
    /// `N x K`.
    pub loadings_t: Array2<f64>,
    /// `N x N`.
    pub residual_projection: Array2<f64>,
}

impl FactorDecomposition {
    /// Loadings and projection implied by fixed factor weights.
    pub fn from_weights(weights: &Array2<f64>, ridge: f64) -> Result<Self> {
        let g = Graph::new();
        let w = g.constant_array(weights.clone().into_dyn());
        let bt = loadings(&g, w, ridge)?;
        let proj = residual_projection(&g, w, bt)?;
        let loadings_t = to2(g.value(bt).into_array());
        let residual_projection = to2(g.value(proj).into_array());
        Ok(Self {
            factor_weights: weights.clone(),
            loadings_t,
            residual_projection,
        })
    }

    /// Attention decomposition from the `N x P` features of the previous date.
    pub fn attention(features_prev: ArrayView2<'_, f64>, params: &AttentionFactorParams) -> Result<Self> {
        let weights = attention_weights_value(features_prev, params)?;
        Self::from_weights(&weights, params.ridge)
    }

    /// `F_t = ω_F R_t` and `ε_t = ω_ε R_t`.
    pub fn apply(&self, returns: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        (
            self.factor_weights.dot(returns),
            self.residual_projection.dot(returns),
        )
    }
}

fn to2(a: ArrayD<f64>) -> Array2<f64> {
    a.into_dimensionality().expect("rank 2")
}

/// [`attention_weights`] on plain arrays.
pub fn attention_weights_value(
    features: ArrayView2<'_, f64>,
    params: &AttentionFactorParams,
) -> Result<Array2<f64>> {
    if features.ncols() != params.embedding.nrows() {
        return Err(Error::contract(format!(
            "features have {} columns, embedding expects {}",
            features.ncols(),
            params.embedding.nrows()
        )));
    }
    let g = Graph::new();
    let x = g.constant_array(features.to_owned().into_dyn());
    let w = attention_weights(&g, x, AttentionVars::constants(&g, params))?;
    let out = g.value(w).into_array();
    Ok(to2(out))
}

/// Factor returns and residuals of a `T x N` return window given factor
/// weights formed at each date (`weights[t]` applies to returns at `t + 1`).
///
/// The result covers dates `1..T`: row `r` is date `r + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSeries {
    /// `(T - 1) x N`.
    pub residuals: Array2<f64>,
    /// `(T - 1) x K`.
    pub factors: Array2<f64>,
}

pub fn residuals(
    returns: ArrayView2<'_, f64>,
    weights: &[Array2<f64>],
    ridge: f64,
) -> Result<ResidualSeries> {
    let (t, n) = returns.dim();
    if weights.len() != t || t < 2 {
        return Err(Error::contract(format!(
            "need one weight matrix per date ({t}), got {}",
            weights.len()
        )));
    }
    let k = weights[0].nrows();
    let mut eps = Array2::zeros((t - 1, n));
    let mut fac = Array2::zeros((t - 1, k));
    for d in 1..t {
        let w = &weights[d - 1];
        if w.dim() != (k, n) {
            return Err(Error::contract(format!(
                "weights at date {} are {:?}, expected ({k}, {n})",
                d - 1,
                w.dim()
            )));
        }
        let dec = FactorDecomposition::from_weights(w, ridge)?;
        let (f, e) = dec.apply(&returns.row(d).to_owned());
        eps.row_mut(d - 1).assign(&e);
        fac.row_mut(d - 1).assign(&f);
    }
    Ok(ResidualSeries {
        residuals: eps,
        factors: fac,
    })
}

/// Top-`k` principal directions of a return window as rows (`K x N`).
///
/// Uses demeaned returns and the `1/(W-1)` covariance; `min_len` is the
/// configured window length.
pub fn pca_weights(window: ArrayView2<'_, f64>, k: usize, min_len: usize) -> Result<Array2<f64>> {
    let (w, n) = window.dim();
    if w < min_len.max(2) || w < k {
        return Err(Error::InsufficientHistory {
            needed: min_len.max(k).max(2),
            available: w,
        });
    }
    if k == 0 || k > n {
        return Err(Error::contract(format!("PCA needs 1 <= K <= N, got K={k}, N={n}")));
    }
    let mean = window.mean_axis(Axis(0)).expect("nonempty window");
    let centered = &window - &mean.insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / (w as f64 - 1.0);
    // Enforce exact symmetry before the eigensolver.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    let eig = symmetric_eigendecomposition(cov.view(), k)?;
    Ok(eig.vectors.t().to_owned())
}

/// Residual projections from PCA weights re-estimated at every date on the
/// trailing `window` returns. Entry `t` uses returns `t - window + 1 ..= t`
/// and is `None` until enough history exists.
pub fn rolling_pca_projections(
    returns: &Array2<f64>,
    window: usize,
    k: usize,
) -> Result<Vec<Option<Array2<f64>>>> {
    let (t, n) = returns.dim();
    let mut out = Vec::with_capacity(t);
    for d in 0..t {
        if d + 1 < window {
            out.push(None);
            continue;
        }
        let w = pca_weights(returns.slice(s![d + 1 - window..=d, ..]), k, window)?;
        // Orthonormal rows: βᵀ = ωᵀ and ω_ε = I - ωᵀω.
        let proj = Array2::<f64>::eye(n) - w.t().dot(&w);
        out.push(Some(proj));
    }
    Ok(out)
}

/// Stacks per-date matrices into a `D x R x C` tensor value.
pub(crate) fn stack(mats: &[&Array2<f64>]) -> ArrayD<f64> {
    let (r, c) = mats[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[mats.len(), r, c]));
    for (d, m) in mats.iter().enumerate() {
        out.index_axis_mut(Axis(0), d).assign(&m.view().into_dyn());
    }
    out
}
