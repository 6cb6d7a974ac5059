//! Batch normalization and inverted dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Values retained from a training-mode batchnorm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Real> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<f64>,
    /// `None` in inference mode, otherwise the batch statistics.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

fn channels_of<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>) -> Result<usize> {
    let c = *x.shape().last().expect("non-empty shape");
    if x.rank() < 2 || gamma.shape() != [c] {
        return Err(Error::shape(format!(
            "batchnorm parameters {:?} do not match channel axis of {:?}",
            gamma.shape(),
            x.shape()
        )));
    }
    Ok(c)
}

/// Normalizes each trailing-axis channel. With `train`, batch statistics are used
/// (biased variance) and returned in the cache; otherwise the moving statistics.
pub fn batchnorm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    moving_mean: &Tensor<T>,
    moving_var: &Tensor<T>,
    eps: f64,
    train: bool,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = channels_of(x, gamma)?;
    for p in [beta, moving_mean, moving_var] {
        if p.shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm vector {:?} should be [{c}]",
                p.shape()
            )));
        }
    }
    let xd = x.data();
    let count = xd.len() / c;
    let (mean, var) = if train {
        let mut mean = vec![0.0f64; c];
        for row in xd.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0f64; c];
        for row in xd.chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= count as f64);
        (mean, var)
    } else {
        (moving_mean.to_f64_vec(), moving_var.to_f64_vec())
    };
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = Vec::with_capacity(xd.len());
    let mut out = Vec::with_capacity(xd.len());
    for row in xd.chunks(c) {
        for ch in 0..c {
            let n = (row[ch].as_f64() - mean[ch]) * inv_std[ch];
            normalized.push(T::from_f64(n));
            out.push(T::from_f64(n) * gamma.data()[ch] + beta.data()[ch]);
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        BatchNormCache {
            normalized,
            inv_std,
            batch_stats: train.then_some((mean, var)),
        },
    ))
}

/// `moving = momentum * moving + (1 - momentum) * batch`, per channel.
pub fn update_moving<T: Real>(moving: &Tensor<T>, batch: &[f64], momentum: f64) -> Tensor<T> {
    let data = moving
        .data()
        .iter()
        .zip(batch)
        .map(|(&m, &b)| T::from_f64(momentum * m.as_f64() + (1.0 - momentum) * b))
        .collect();
    Tensor::from_parts(moving.shape().to_vec(), data)
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Real>(
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.len();
    let gd = grad_out.data();
    if gd.len() != cache.normalized.len() || *grad_out.shape().last().expect("non-empty") != c {
        return Err(Error::shape(format!(
            "batchnorm gradient {:?} does not match forward",
            grad_out.shape()
        )));
    }
    let count = gd.len() / c;
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gn = vec![0.0f64; c];
    for (g_row, n_row) in gd.chunks(c).zip(cache.normalized.chunks(c)) {
        for ch in 0..c {
            let g = g_row[ch].as_f64();
            sum_g[ch] += g;
            sum_gn[ch] += g * n_row[ch].as_f64();
        }
    }
    let gamma_f: Vec<f64> = gamma.to_f64_vec();
    let mut gx = Vec::with_capacity(gd.len());
    let n = count as f64;
    for (g_row, n_row) in gd.chunks(c).zip(cache.normalized.chunks(c)) {
        for ch in 0..c {
            let g = g_row[ch].as_f64();
            let v = if cache.batch_stats.is_some() {
                gamma_f[ch] * cache.inv_std[ch] / n
                    * (n * g - sum_g[ch] - n_row[ch].as_f64() * sum_gn[ch])
            } else {
                gamma_f[ch] * cache.inv_std[ch] * g
            };
            gx.push(T::from_f64(v));
        }
    }
    Ok((
        Tensor::from_parts(grad_out.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], sum_gn.into_iter().map(T::from_f64).collect()),
        Tensor::from_parts(vec![c], sum_g.into_iter().map(T::from_f64).collect()),
    ))
}

/// Draws an inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`. Rate 0 draws nothing.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(
    len: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!(
            "dropout rate {rate} must be in [0, 1)"
        )));
    }
    if rate == 0.0 {
        return Ok(vec![T::one(); len]);
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect())
}

pub fn apply_mask<T: Real>(x: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let data = x.data().iter().zip(mask).map(|(&v, &m)| v * m).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}
