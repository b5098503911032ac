use serde::{Deserialize, Serialize};

use super::tensor::Tensor5;
use super::Mode;
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel batch normalization over `(n, d, h, w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// What the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    mode: Mode,
    normalized: Tensor5,
    inv_std: Vec<f64>,
    /// Batch mean and unbiased variance per channel; empty in eval mode.
    batch_stats: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub input: Tensor5,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Normalizes with batch statistics (train) or running statistics (eval).
/// Running statistics are folded in separately by [`update_running_stats`].
pub fn batchnorm_forward(
    x: &Tensor5,
    state: &BatchNormState,
    mode: Mode,
) -> Result<(Tensor5, BatchNormCache)> {
    let [n, c, ..] = x.shape();
    if c != state.channels() {
        return Err(Error::ShapeMismatch(format!(
            "batch norm over {} channels given {c}",
            state.channels()
        )));
    }
    let count = (n * x.spatial_len()) as f64;
    let mut normalized = Tensor5::zeros(x.shape());
    let mut y = Tensor5::zeros(x.shape());
    let mut inv_std = vec![0.0; c];
    let mut batch_stats = Vec::new();
    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = (0..n).map(|b| x.channel(b, ch).iter().sum::<f64>()).sum::<f64>() / count;
                let var = (0..n)
                    .map(|b| x.channel(b, ch).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                    .sum::<f64>()
                    / count;
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                batch_stats.push((mean, unbiased));
                (mean, var)
            }
            Mode::Eval => (state.running_mean[ch], state.running_var[ch]),
        };
        let is = 1.0 / (var + state.epsilon).sqrt();
        inv_std[ch] = is;
        let (g, bt) = (state.gamma[ch], state.beta[ch]);
        for b in 0..n {
            let src = x.channel(b, ch);
            let xn = normalized.channel_mut(b, ch);
            for (o, &v) in xn.iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
            let xn = normalized.channel(b, ch);
            let out = &mut y.data_mut()[(b * c + ch) * xn.len()..(b * c + ch + 1) * xn.len()];
            for (o, v) in out.iter_mut().zip(xn) {
                *o = g * v + bt;
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            mode,
            normalized,
            inv_std,
            batch_stats,
        },
    ))
}

/// Exponential moving average of the batch statistics of a train-mode pass.
pub fn update_running_stats(state: &mut BatchNormState, cache: &BatchNormCache) {
    let m = state.momentum;
    for (ch, &(mean, var)) in cache.batch_stats.iter().enumerate() {
        state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mean;
        state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * var;
    }
}

pub fn batchnorm_backward(
    cache: &BatchNormCache,
    state: &BatchNormState,
    grad_out: &Tensor5,
) -> Result<BatchNormGrads> {
    grad_out.expect_shape(cache.normalized.shape(), "batch norm grad_out")?;
    let [n, c, ..] = grad_out.shape();
    let count = (n * grad_out.spatial_len()) as f64;
    let mut input = Tensor5::zeros(grad_out.shape());
    let mut gamma = vec![0.0; c];
    let mut beta = vec![0.0; c];
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            for (g, xn) in grad_out.channel(b, ch).iter().zip(cache.normalized.channel(b, ch)) {
                sum_g += g;
                sum_gx += g * xn;
            }
        }
        gamma[ch] = sum_gx;
        beta[ch] = sum_g;
        let scale = state.gamma[ch] * cache.inv_std[ch];
        for b in 0..n {
            let xn = cache.normalized.channel(b, ch).to_vec();
            let g = grad_out.channel(b, ch).to_vec();
            let dst = input.channel_mut(b, ch);
            match cache.mode {
                Mode::Train => {
                    let (mg, mgx) = (sum_g / count, sum_gx / count);
                    for i in 0..dst.len() {
                        dst[i] = scale * (g[i] - mg - xn[i] * mgx);
                    }
                }
                Mode::Eval => {
                    for i in 0..dst.len() {
                        dst[i] = scale * g[i];
                    }
                }
            }
        }
    }
    Ok(BatchNormGrads { input, gamma, beta })
}
