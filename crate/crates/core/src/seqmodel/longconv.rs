use ndarray::{Array1, Array2, ArrayD, ArrayView2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};

use crate::diffmath::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;

/// One long-convolution layer: kernel `d x s` and per-channel skip `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LongConvLayer {
    pub kernel: Array2<f64>,
    pub skip: Array1<f64>,
}

/// Policy mapping an asset's residual history to one raw portfolio weight:
/// input projection `1 -> d`, `L` long-convolution layers (GELU between
/// layers), and a linear head `d -> 1` on the last time step.
#[derive(Clone, Debug, PartialEq)]
pub struct LongConvPolicyParams {
    pub input_weight: Array1<f64>,
    pub input_bias: Array1<f64>,
    pub layers: Vec<LongConvLayer>,
    pub output_weight: Array1<f64>,
    pub output_bias: f64,
    pub dropout: f64,
    pub squash: f64,
}

/// Geometric-decay kernel: `K[h, t] = x * exp(-(t/s) * (d/2)^(h/d))` for
/// 1-based lag `t` and channel `h`, with standard normal `x` per entry.
pub fn init_kernel(d: usize, s: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut k = Array2::zeros((d, s));
    for h in 0..d {
        let rate = (d as f64 / 2.0).powf((h + 1) as f64 / d as f64);
        for t in 0..s {
            let x: f64 = rng.sample(StandardNormal);
            k[[h, t]] = x * (-((t + 1) as f64 / s as f64) * rate).exp();
        }
    }
    k
}

/// Elementwise soft threshold `sign(K) * max(|K| - lambda, 0)`.
pub fn squash(kernel: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("squash strength {lambda} < 0")));
    }
    Ok(kernel.mapv(|x| {
        if x.abs() <= lambda {
            0.0
        } else {
            x.signum() * (x.abs() - lambda)
        }
    }))
}

impl LongConvPolicyParams {
    /// Fresh parameters. Kernels use [`init_kernel`], skips are standard
    /// normal, projection weights are uniform with fan-in scaling and biases
    /// start at zero.
    pub fn init(
        hidden: usize,
        lookback: usize,
        n_layers: usize,
        dropout: f64,
        squash: f64,
        seed: u64,
    ) -> Result<Self> {
        if hidden == 0 || lookback == 0 || n_layers == 0 {
            return Err(Error::Config(
                "LongConv needs hidden >= 1, lookback >= 1 and at least one layer".into(),
            ));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        if !(squash >= 0.0) {
            return Err(Error::Config(format!("squash strength {squash} < 0")));
        }
        let mut r = rng::stream(seed, "init:longconv");
        let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        let input_weight = Array1::from_shape_simple_fn(hidden, || r.sample(unit));
        let layers = (0..n_layers)
            .map(|_| {
                let kernel = init_kernel(hidden, lookback, &mut r);
                let skip = Array1::from_shape_simple_fn(hidden, || r.sample::<f64, _>(StandardNormal));
                LongConvLayer { kernel, skip }
            })
            .collect();
        let scale = 1.0 / (hidden as f64).sqrt();
        let output_weight = Array1::from_shape_simple_fn(hidden, || scale * r.sample(unit));
        Ok(Self {
            input_weight,
            input_bias: Array1::zeros(hidden),
            layers,
            output_weight,
            output_bias: 0.0,
            dropout,
            squash,
        })
    }

    pub fn hidden(&self) -> usize {
        self.input_weight.len()
    }

    pub fn lookback(&self) -> usize {
        self.layers[0].kernel.ncols()
    }

    /// Parameter arrays in a fixed order.
    pub fn arrays(&self) -> Vec<ArrayD<f64>> {
        let mut out = vec![
            self.input_weight.clone().into_dyn(),
            self.input_bias.clone().into_dyn(),
        ];
        for l in &self.layers {
            out.push(l.kernel.clone().into_dyn());
            out.push(l.skip.clone().into_dyn());
        }
        out.push(self.output_weight.clone().into_dyn());
        out.push(ArrayD::from_elem(IxDyn(&[]), self.output_bias));
        out
    }

    /// Inverse of [`arrays`](Self::arrays).
    pub fn set_arrays(&mut self, arrays: &[ArrayD<f64>]) -> Result<()> {
        let expected = 4 + 2 * self.layers.len();
        if arrays.len() != expected {
            return Err(Error::contract(format!(
                "expected {expected} policy arrays, got {}",
                arrays.len()
            )));
        }
        let mut it = arrays.iter();
        let take1 = |dst: &mut Array1<f64>, a: &ArrayD<f64>| -> Result<()> {
            if a.shape() != dst.shape() {
                return Err(Error::contract("policy array shape changed"));
            }
            dst.assign(&a.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1"));
            Ok(())
        };
        take1(&mut self.input_weight, it.next().expect("len checked"))?;
        take1(&mut self.input_bias, it.next().expect("len checked"))?;
        for l in 0..self.layers.len() {
            let k = it.next().expect("len checked");
            if k.shape() != self.layers[l].kernel.shape() {
                return Err(Error::contract("kernel shape changed"));
            }
            self.layers[l]
                .kernel
                .assign(&k.view().into_dimensionality::<ndarray::Ix2>().expect("rank 2"));
            take1(&mut self.layers[l].skip, it.next().expect("len checked"))?;
        }
        take1(&mut self.output_weight, it.next().expect("len checked"))?;
        self.output_bias = *it.next().expect("len checked").first().expect("scalar");
        Ok(())
    }
}

/// Graph handles for policy parameters.
#[derive(Clone, Debug)]
pub struct PolicyVars {
    pub input_weight: Var,
    pub input_bias: Var,
    pub kernels: Vec<Var>,
    pub skips: Vec<Var>,
    pub output_weight: Var,
    pub output_bias: Var,
}

impl PolicyVars {
    fn build(g: &Graph, p: &LongConvPolicyParams, param: bool) -> Self {
        let leaf = |a: ArrayD<f64>| if param { g.param_array(a) } else { g.constant_array(a) };
        let arrays = p.arrays();
        let n = p.layers.len();
        let vars: Vec<Var> = arrays.into_iter().map(leaf).collect();
        Self {
            input_weight: vars[0],
            input_bias: vars[1],
            kernels: (0..n).map(|l| vars[2 + 2 * l]).collect(),
            skips: (0..n).map(|l| vars[3 + 2 * l]).collect(),
            output_weight: vars[2 + 2 * n],
            output_bias: vars[3 + 2 * n],
        }
    }

    pub fn params(g: &Graph, p: &LongConvPolicyParams) -> Self {
        Self::build(g, p, true)
    }

    pub fn constants(g: &Graph, p: &LongConvPolicyParams) -> Self {
        Self::build(g, p, false)
    }

    /// Handles in the order of [`LongConvPolicyParams::arrays`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.input_weight, self.input_bias];
        for (k, s) in self.kernels.iter().zip(&self.skips) {
            out.push(*k);
            out.push(*s);
        }
        out.push(self.output_weight);
        out.push(self.output_bias);
        out
    }
}

/// Inverted dropout on channel activations.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &Graph, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.shape(x);
        let mask = ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
            if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = g.constant_array(mask);
        g.mul(x, m)
    }
}

pub enum Mode<'a> {
    Eval,
    Train(Dropout<'a>),
}

impl Mode<'_> {
    fn dropout(&mut self, g: &Graph, x: Var) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(d) => d.apply(g, x),
        }
    }
}

/// `y = squash(K) * u + D ⊙ u` along the last axis of `u` (`B x d x s`),
/// followed by dropout in training mode.
pub fn longconv_forward(
    g: &Graph,
    u: Var,
    kernel: Var,
    skip: Var,
    squash_strength: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let us = g.shape(u);
    let ks = g.shape(kernel);
    let d = ks.first().copied().unwrap_or(0);
    if us.len() != 3 || ks.len() != 2 || us[1] != d || us[2] != ks[1] || g.shape(skip) != [d] {
        return Err(Error::contract(format!(
            "longconv_forward: u {us:?}, kernel {ks:?}, skip {:?}",
            g.shape(skip)
        )));
    }
    let kbar = g.soft_threshold(kernel, squash_strength)?;
    let conv = g.causal_conv(u, kbar)?;
    let skip = g.reshape(skip, &[d, 1])?;
    let direct = g.mul(u, skip)?;
    let y = g.add(conv, direct)?;
    mode.dropout(g, y)
}

/// Raw weights `B` from residual histories `B x s'` (most recent last).
///
/// Histories longer than the lookback are truncated to the most recent `s`
/// values.
pub fn policy_forward(
    g: &Graph,
    history: Var,
    vars: &PolicyVars,
    squash_strength: f64,
    mut mode: Mode<'_>,
) -> Result<Var> {
    let hs = g.shape(history);
    let ks = g.shape(vars.kernels[0]);
    let (d, s) = (ks[0], ks[1]);
    if hs.len() != 2 {
        return Err(Error::contract(format!("history must be B x s, got {hs:?}")));
    }
    if hs[1] < s {
        return Err(Error::InsufficientHistory {
            needed: s,
            available: hs[1],
        });
    }
    let b = hs[0];
    let x = if hs[1] > s {
        g.slice(history, 1, hs[1] - s, hs[1])?
    } else {
        history
    };
    let w_in = g.reshape(vars.input_weight, &[1, d])?;
    let b_in = g.reshape(vars.input_bias, &[1, d])?;

    let last = if vars.kernels.len() == 1 {
        // The last-step output of a single layer is a dot product of each
        // history with the flipped kernel.
        let kbar = g.soft_threshold(vars.kernels[0], squash_strength)?;
        let flipped = g.flip(kbar, 1)?;
        let ft = g.transpose(flipped)?;
        let z = g.matmul(x, ft)?;
        let conv_in = g.mul(z, w_in)?;
        let rowsum = g.sum_axis(kbar, 1)?;
        let rowsum = g.reshape(rowsum, &[1, d])?;
        let conv_bias = g.mul(b_in, rowsum)?;
        let x_last = g.slice(x, 1, s - 1, s)?;
        let u_last = g.mul(x_last, w_in)?;
        let u_last = g.add(u_last, b_in)?;
        let skip = g.reshape(vars.skips[0], &[1, d])?;
        let direct = g.mul(u_last, skip)?;
        let y = g.add(conv_in, conv_bias)?;
        g.add(y, direct)?
    } else {
        let x3 = g.reshape(x, &[b, 1, s])?;
        let w3 = g.reshape(vars.input_weight, &[d, 1])?;
        let b3 = g.reshape(vars.input_bias, &[d, 1])?;
        let mut u = g.mul(x3, w3)?;
        u = g.add(u, b3)?;
        let n = vars.kernels.len();
        for l in 0..n {
            if l + 1 < n {
                let y = longconv_forward(g, u, vars.kernels[l], vars.skips[l], squash_strength, &mut mode)?;
                u = g.gelu(y)?;
            } else {
                u = longconv_forward(g, u, vars.kernels[l], vars.skips[l], squash_strength, &mut Mode::Eval)?;
            }
        }
        let y = g.slice(u, 2, s - 1, s)?;
        g.reshape(y, &[b, d])?
    };
    let last = mode.dropout(g, last)?;
    let w_out = g.reshape(vars.output_weight, &[d, 1])?;
    let out = g.matmul(last, w_out)?;
    let out = g.add(out, vars.output_bias)?;
    g.reshape(out, &[b])
}

/// [`policy_forward`] in evaluation mode on plain arrays (`N x s`).
pub fn policy_weights(history: ArrayView2<'_, f64>, params: &LongConvPolicyParams) -> Result<Array1<f64>> {
    let g = Graph::new();
    let h = g.constant_array(history.to_owned().into_dyn());
    let vars = PolicyVars::constants(&g, params);
    let out = policy_forward(&g, h, &vars, params.squash, Mode::Eval)?;
    let v = g.value(out).into_array();
    Ok(v.into_dimensionality().expect("rank 1"))
}
