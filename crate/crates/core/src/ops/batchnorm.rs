//! Batch normalization over `[N, C, D, H, W]`: statistics are per channel,
//! pooled over the batch and all spatial positions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BnSettings {
    pub eps: f64,
    /// Weight of the new batch statistic in the running average.
    pub momentum: f64,
}

impl Default for BnSettings {
    fn default() -> Self {
        BnSettings { eps: 1e-5, momentum: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache<T> {
    pub mode: BnMode,
    /// Normalized input `x̂`.
    pub x_hat: Tensor<T>,
    /// `1/√(σ²+ε)` per channel.
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormOutput<T> {
    pub y: Tensor<T>,
    pub cache: BatchNormCache<T>,
    /// Updated running mean and variance (unchanged in infer mode).
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_gamma: Tensor<T>,
    pub grad_beta: Tensor<T>,
}

fn check_channel<T: Scalar>(t: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::shape(
            "batchnorm3d",
            format!("{what} has shape {:?}, input has {c} channels", t.shape()),
        ));
    }
    Ok(())
}

/// `y = γ·(x−μ)/√(σ²+ε) + β`.
///
/// The running variance is updated with the unbiased batch variance.
pub fn batchnorm3d_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: BnMode,
    settings: BnSettings,
) -> Result<BatchNormOutput<T>> {
    let [n, c, d, h, w] = x.dims5("batchnorm3d_forward")?;
    check_channel(gamma, c, "gamma")?;
    check_channel(beta, c, "beta")?;
    check_channel(running_mean, c, "running mean")?;
    check_channel(running_var, c, "running variance")?;
    let vol = d * h * w;
    let count = n * vol;
    if count == 0 {
        return Err(Error::Empty("batchnorm3d_forward input"));
    }
    let xs = x.data();

    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    let mut new_mean = running_mean.clone();
    let mut new_var = running_var.clone();
    match mode {
        BnMode::Train => {
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xs[(b * c + ch) * vol..][..vol].iter().map(|v| v.to_f64()).sum::<f64>();
                }
                let mu = s / count as f64;
                let mut ss = 0.0;
                for b in 0..n {
                    ss += xs[(b * c + ch) * vol..][..vol]
                        .iter()
                        .map(|v| {
                            let e = v.to_f64() - mu;
                            e * e
                        })
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = ss / count as f64;
                let unbiased = if count > 1 { ss / (count - 1) as f64 } else { var[ch] };
                let m = settings.momentum;
                new_mean.data_mut()[ch] =
                    T::from_f64((1.0 - m) * running_mean.data()[ch].to_f64() + m * mu);
                new_var.data_mut()[ch] =
                    T::from_f64((1.0 - m) * running_var.data()[ch].to_f64() + m * unbiased);
            }
        }
        BnMode::Infer => {
            for ch in 0..c {
                mean[ch] = running_mean.data()[ch].to_f64();
                var[ch] = running_var.data()[ch].to_f64();
            }
        }
    }

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + settings.eps)).collect();
    let mut x_hat = vec![T::ZERO; x.len()];
    let mut y = vec![T::ZERO; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * vol;
            let (mu, is) = (T::from_f64(mean[ch]), T::from_f64(inv_std[ch]));
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for i in base..base + vol {
                let xh = (xs[i] - mu) * is;
                x_hat[i] = xh;
                y[i] = g.mul_add(xh, be);
            }
        }
    }
    Ok(BatchNormOutput {
        y: Tensor::from_vec(x.shape(), y)?,
        cache: BatchNormCache { mode, x_hat: Tensor::from_vec(x.shape(), x_hat)?, inv_std },
        running_mean: new_mean,
        running_var: new_var,
    })
}

/// Full gradient, including the paths through the batch mean and variance
/// in train mode.
pub fn batchnorm3d_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_y: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    cache.x_hat.check_same_shape(grad_y, "batchnorm3d_backward")?;
    let [n, c, d, h, w] = grad_y.dims5("batchnorm3d_backward")?;
    check_channel(gamma, c, "gamma")?;
    let vol = d * h * w;
    let count = (n * vol) as f64;
    let (xh, gy) = (cache.x_hat.data(), grad_y.data());

    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * vol;
            for i in base..base + vol {
                let g = gy[i].to_f64();
                sum_g[ch] += g;
                sum_gx[ch] += g * xh[i].to_f64();
            }
        }
    }

    let mut gx = vec![T::ZERO; gy.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * vol;
            let scale = gamma.data()[ch].to_f64() * cache.inv_std[ch];
            match cache.mode {
                BnMode::Train => {
                    let mg = sum_g[ch] / count;
                    let mgx = sum_gx[ch] / count;
                    for i in base..base + vol {
                        gx[i] = T::from_f64(scale * (gy[i].to_f64() - mg - xh[i].to_f64() * mgx));
                    }
                }
                BnMode::Infer => {
                    let s = T::from_f64(scale);
                    for i in base..base + vol {
                        gx[i] = s * gy[i];
                    }
                }
            }
        }
    }
    Ok(BatchNormGrads {
        grad_x: Tensor::from_vec(grad_y.shape(), gx)?,
        grad_gamma: Tensor::from_vec(&[c], sum_gx.into_iter().map(T::from_f64).collect())?,
        grad_beta: Tensor::from_vec(&[c], sum_g.into_iter().map(T::from_f64).collect())?,
    })
}
