use serde::{Deserialize, Serialize};

use super::Tensor5;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch-norm state.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

impl<S: Scalar> BnParams<S> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![S::one(); channels],
            beta: vec![S::zero(); channels],
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormOutput<S> {
    pub output: Tensor5<S>,
    /// Running statistics after this call; unchanged in eval mode.
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

/// Batch normalization over `(N, T, H, W)` per channel.
///
/// Train mode normalizes with biased batch statistics and blends the
/// unbiased batch variance into the running estimate with momentum 0.1.
pub fn batch_norm<S: Scalar>(x: &Tensor5<S>, p: &BnParams<S>, mode: Mode) -> Result<BatchNormOutput<S>> {
    let c = x.dims().c;
    if p.gamma.len() != c || p.beta.len() != c || p.running_mean.len() != c || p.running_var.len() != c {
        return Err(Error::InvalidShape(format!(
            "batch norm params sized {} for {c} channels",
            p.gamma.len()
        )));
    }
    match mode {
        Mode::Eval => Ok(BatchNormOutput {
            output: normalize(x, &p.running_mean, &p.running_var, &p.gamma, &p.beta),
            running_mean: p.running_mean.clone(),
            running_var: p.running_var.clone(),
        }),
        Mode::Train => {
            let (mean, var) = channel_stats(x);
            let output = normalize(x, &mean, &var, &p.gamma, &p.beta);
            let (running_mean, running_var) =
                update_running(&p.running_mean, &p.running_var, &mean, &var, stat_count(x));
            Ok(BatchNormOutput {
                output,
                running_mean,
                running_var,
            })
        }
    }
}

pub(crate) fn stat_count<S: Scalar>(x: &Tensor5<S>) -> usize {
    let d = x.dims();
    d.n * d.volume()
}

/// Per-channel mean and biased variance, accumulated in storage order.
pub(crate) fn channel_stats<S: Scalar>(x: &Tensor5<S>) -> (Vec<S>, Vec<S>) {
    let d = x.dims();
    let count = S::lit(stat_count(x) as f64);
    let mut mean = vec![S::zero(); d.c];
    for n in 0..d.n {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += x.volume(n, c).iter().copied().sum::<S>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![S::zero(); d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let mu = mean[c];
            var[c] += x.volume(n, c).iter().map(|&v| (v - mu) * (v - mu)).sum::<S>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

pub(crate) fn update_running<S: Scalar>(
    running_mean: &[S],
    running_var: &[S],
    mean: &[S],
    var: &[S],
    count: usize,
) -> (Vec<S>, Vec<S>) {
    let m = S::lit(BN_MOMENTUM);
    let keep = S::one() - m;
    let unbias = if count > 1 {
        S::lit(count as f64 / (count - 1) as f64)
    } else {
        S::one()
    };
    let rm = running_mean
        .iter()
        .zip(mean)
        .map(|(&r, &b)| keep * r + m * b)
        .collect();
    let rv = running_var
        .iter()
        .zip(var)
        .map(|(&r, &b)| keep * r + m * b * unbias)
        .collect();
    (rm, rv)
}

pub(crate) fn normalize<S: Scalar>(x: &Tensor5<S>, mean: &[S], var: &[S], gamma: &[S], beta: &[S]) -> Tensor5<S> {
    let d = x.dims();
    let eps = S::lit(BN_EPS);
    let mut out = x.clone();
    for n in 0..d.n {
        for c in 0..d.c {
            let inv = S::one() / (var[c] + eps).sqrt();
            let (g, b, mu) = (gamma[c], beta[c], mean[c]);
            for v in out.volume_mut(n, c) {
                *v = g * (*v - mu) * inv + b;
            }
        }
    }
    out.debug_check_finite();
    out
}
