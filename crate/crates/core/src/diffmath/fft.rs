//! Causal linear convolution through zero-padded FFTs.
//!
//! The transform length is the next power of two at or above `2T - 1`, so the
//! circular product of the padded spectra equals the linear convolution on
//! the first `T` outputs.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rustfft::{num_complex::Complex64, Fft, FftPlanner};

use super::Tensor;
use crate::error::{Error, Result};

struct ConvPlan {
    len: usize,
    n_fft: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl ConvPlan {
    fn new(len: usize) -> Self {
        let n_fft = (2 * len - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        Self {
            len,
            n_fft,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    fn spectrum<'a>(&self, signal: impl Iterator<Item = &'a f64>) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for (slot, &v) in buf.iter_mut().zip(signal) {
            slot.re = v;
        }
        self.forward.process(&mut buf);
        buf
    }

    /// Inverse transform, keeping the first `len` real samples.
    fn real_prefix(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.inverse.process(&mut spec);
        let scale = 1.0 / self.n_fft as f64;
        spec[..self.len].iter().map(|c| c.re * scale).collect()
    }
}

fn check_shapes(u: &[usize], kernel: &[usize]) -> Result<(usize, usize)> {
    if kernel.len() != 2 {
        return Err(Error::contract(format!(
            "kernel must be [d, T], got {kernel:?}"
        )));
    }
    let ok = match u.len() {
        2 => u == kernel,
        3 => &u[1..] == kernel,
        _ => false,
    };
    if !ok || kernel[1] == 0 {
        return Err(Error::contract(format!(
            "convolution shapes differ: input {u:?}, kernel {kernel:?}"
        )));
    }
    Ok((kernel[0], kernel[1]))
}

fn flat<'a>(a: &'a ndarray::CowArray<'_, f64, IxDyn>) -> &'a [f64] {
    a.as_slice().expect("standard layout")
}

/// Forward pass over `u` of shape `[d, T]` or `[B, d, T]` with a shared `[d, T]` kernel.
pub(crate) fn causal_conv_forward(u: &ArrayD<f64>, kernel: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let (d, len) = check_shapes(u.shape(), kernel.shape())?;
    let plan = ConvPlan::new(len);
    let kernel = kernel.as_standard_layout();
    let u_std = u.as_standard_layout();
    let kernel_spectra: Vec<_> = flat(&kernel).chunks(len).map(|k| plan.spectrum(k.iter())).collect();
    let mut out = Vec::with_capacity(u.len());
    for (r, row) in flat(&u_std).chunks(len).enumerate() {
        let mut spec = plan.spectrum(row.iter());
        for (s, k) in spec.iter_mut().zip(&kernel_spectra[r % d]) {
            *s *= k;
        }
        out.extend(plan.real_prefix(spec));
    }
    Ok(ArrayD::from_shape_vec(IxDyn(u.shape()), out).expect("shape preserved"))
}

/// Adjoints of the causal convolution with respect to input and kernel.
///
/// `du[j] = sum_{i>=j} g[i] k[i-j]` and `dk[m] = sum_i g[i] u[i-m]`, both
/// obtained by convolving the time-reversed adjoint.
pub(crate) fn causal_conv_backward(
    u: &ArrayD<f64>,
    kernel: &ArrayD<f64>,
    grad: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let (d, len) = check_shapes(u.shape(), kernel.shape()).expect("validated in forward");
    let plan = ConvPlan::new(len);
    let kernel_std = kernel.as_standard_layout();
    let u_std = u.as_standard_layout();
    let grad_std = grad.as_standard_layout();
    let kernel_spectra: Vec<_> = flat(&kernel_std).chunks(len).map(|k| plan.spectrum(k.iter())).collect();
    let mut kernel_acc = vec![vec![Complex64::new(0.0, 0.0); plan.n_fft]; d];
    let mut du = Vec::with_capacity(u.len());
    for (r, (g_row, u_row)) in flat(&grad_std).chunks(len).zip(flat(&u_std).chunks(len)).enumerate() {
        let h = r % d;
        let g_rev = plan.spectrum(g_row.iter().rev());
        let mut spec = g_rev.clone();
        for (s, k) in spec.iter_mut().zip(&kernel_spectra[h]) {
            *s *= k;
        }
        let mut back = plan.real_prefix(spec);
        back.reverse();
        du.extend(back);

        let u_spec = plan.spectrum(u_row.iter());
        for ((acc, g), uu) in kernel_acc[h].iter_mut().zip(&g_rev).zip(&u_spec) {
            *acc += g * uu;
        }
    }
    let mut dk = Vec::with_capacity(d * len);
    for acc in kernel_acc {
        let mut back = plan.real_prefix(acc);
        back.reverse();
        dk.extend(back);
    }
    (
        ArrayD::from_shape_vec(IxDyn(u.shape()), du).expect("shape preserved"),
        ArrayD::from_shape_vec(IxDyn(kernel.shape()), dk).expect("shape preserved"),
    )
}

/// `out[h, i] = sum_{j <= i} u[h, j] * kernel[h, i - j]` for each channel `h`.
///
/// `u` may carry a leading batch axis; the kernel is shared across it.
pub fn fft_convolve_causal(u: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let out = causal_conv_forward(u.array(), kernel.array())?;
    Ok(Tensor::from_array_unchecked(out))
}
