use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{OqatError, Result};

pub const BN_EPS: f64 = 1e-5;

/// Per-channel running statistics and affine parameters of one BatchNorm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    pub momentum: f32,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f32) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Blend batch statistics into the running buffers:
    /// `running = (1 - m) * running + m * batch`.
    pub fn update_running(&mut self, batch_mean: &[f32], batch_var: &[f32]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = ((1.0 - m) * *r + m * b).max(0.0);
        }
    }
}

/// Channel count and elements per channel-plane for `[N, C, ...]` inputs.
pub(crate) fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(OqatError::Shape(format!("batchnorm expects [N, C, ...], got {:?}", shape)));
    }
    let plane = shape[2..].iter().product();
    Ok((shape[0], shape[1], plane))
}

/// Batch mean and biased variance per channel.
pub(crate) fn channel_stats<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * plane).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = s + x[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
        let mu = s / count;
        let mut v = T::zero();
        for b in 0..n {
            for &e in &x[(b * c + ch) * plane..][..plane] {
                let d = e - mu;
                v = v + d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Normalize with the given statistics; returns `(y, x_hat, inv_std)`.
pub(crate) fn bn_apply<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

/// BatchNorm forward on a standalone tensor. Training mode normalizes with
/// batch statistics and updates the running buffers; eval mode uses them.
pub fn batchnorm_forward(input: &Tensor<f32>, state: &mut BatchNormState, training: bool) -> Result<Tensor<f32>> {
    let (n, c, plane) = bn_dims(input.shape())?;
    if c != state.channels() {
        return Err(OqatError::Shape(format!(
            "batchnorm state has {} channels, input {:?}",
            state.channels(),
            input.shape()
        )));
    }
    let (mean, var) = if training {
        let (m, v) = channel_stats(input.data(), n, c, plane);
        state.update_running(&m, &v);
        (m, v)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };
    let (y, _, _) = bn_apply(input.data(), n, c, plane, &mean, &var, &state.scale, &state.shift);
    Tensor::new(input.shape().to_vec(), y)
}
