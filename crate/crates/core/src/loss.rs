//! Class weighting, weighted cross-entropy and soft Dice.
//!
//! Both losses reduce over every voxel of every batch item; sums are
//! accumulated in `f64` regardless of the element type.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{softmax_channels, softmax_channels_backward};
use crate::preprocess::class_frequencies;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::LabelVolume;

/// Per-class loss weights, normalized so the smallest is 1.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        ClassWeights(vec![1.0; classes])
    }

    /// Inverse frequency, scaled so the most frequent class gets weight 1.
    pub fn from_frequencies(freqs: &[f64]) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::Empty("class frequencies"));
        }
        if let Some(class) = freqs.iter().position(|&f| !(f > 0.0)) {
            return Err(Error::AbsentClass { class });
        }
        let fmax = freqs.iter().cloned().fold(0.0, f64::max);
        Ok(ClassWeights(freqs.iter().map(|&f| fmax / f).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Inverse-frequency weights over a training set.
pub fn compute_class_weights(volumes: &[&LabelVolume]) -> Result<ClassWeights> {
    if volumes.is_empty() {
        return Err(Error::Empty("training label volumes"));
    }
    ClassWeights::from_frequencies(&class_frequencies(volumes)?)
}

/// Neumaier-compensated running sum. Loss values are differenced across
/// nearly identical evaluations, so their rounding error matters.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    s: f64,
    c: f64,
}

impl CompensatedSum {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    fn value(self) -> f64 {
        self.s + self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: f64,
    /// Gradient with respect to the loss input (logits or probabilities).
    pub grad: Tensor<T>,
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<[usize; 5]> {
    a.check_same_shape(b, op)?;
    a.dims5(op)
}

fn check_one_hot<T: Scalar>(target: &Tensor<T>, dims: [usize; 5]) -> Result<()> {
    let [n, c, d, h, w] = dims;
    let vol = d * h * w;
    let t = target.data();
    for b in 0..n {
        for v in 0..vol {
            let mut ones = 0;
            for k in 0..c {
                let x = t[(b * c + k) * vol + v];
                if x == T::ONE {
                    ones += 1;
                } else if x != T::ZERO {
                    return Err(Error::Input(format!("target value {x:?} at voxel {v} is not 0 or 1")));
                }
            }
            if ones != 1 {
                return Err(Error::Input(format!("target voxel {v} has {ones} active classes")));
            }
        }
    }
    Ok(())
}

/// `L = −Σ_v w_{t(v)} log p_{t(v)}(v) / Σ_v w_{t(v)}` with `p = softmax(logits)`.
///
/// The target must be one-hot; see [`weighted_cross_entropy_soft`] for
/// the lenient variant.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    weights: &ClassWeights,
) -> Result<LossOutput<T>> {
    let dims = check_pair(logits, target, "weighted_cross_entropy")?;
    check_one_hot(target, dims)?;
    weighted_cross_entropy_soft(logits, target, weights)
}

/// Same loss for arbitrary non-negative targets `g`:
/// `L = −Σ_v Σ_c w_c g_c log p_c / Σ_v Σ_c w_c g_c`.
pub fn weighted_cross_entropy_soft<T: Scalar>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    weights: &ClassWeights,
) -> Result<LossOutput<T>> {
    let [n, c, d, h, w] = check_pair(logits, target, "weighted_cross_entropy")?;
    if weights.0.len() != c {
        return Err(Error::shape(
            "weighted_cross_entropy",
            format!("{} class weights for {c} channels", weights.0.len()),
        ));
    }
    let vol = d * h * w;
    let (z, g) = (logits.data(), target.data());
    let mut grad = vec![0.0f64; z.len()];
    let mut total = CompensatedSum::default();
    let mut norm = CompensatedSum::default();
    let mut logp = vec![0.0f64; c];
    for b in 0..n {
        let base = b * c * vol;
        for v in 0..vol {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(z[base + k * vol + v].to_f64());
            }
            let mut s = 0.0;
            for k in 0..c {
                s += libm::exp(z[base + k * vol + v].to_f64() - m);
            }
            let lse = m + libm::log(s);
            let mut wv = 0.0;
            for k in 0..c {
                let i = base + k * vol + v;
                logp[k] = z[i].to_f64() - lse;
                let wg = weights.0[k] * g[i].to_f64();
                wv += wg;
                total.add(-wg * logp[k]);
            }
            norm.add(wv);
            // ∂/∂z_k of −Σ_c w_c g_c log p_c is p_k·Σ_c w_c g_c − w_k g_k
            for k in 0..c {
                let i = base + k * vol + v;
                grad[i] = libm::exp(logp[k]) * wv - weights.0[k] * g[i].to_f64();
            }
        }
    }
    let norm = norm.value();
    if !(norm > 0.0) {
        return Err(Error::Input("target carries no weight".into()));
    }
    let inv = 1.0 / norm;
    let total = total.value();
    let grad = grad.into_iter().map(|x| T::from_f64(x * inv)).collect();
    Ok(LossOutput { loss: total * inv, grad: Tensor::from_vec(logits.shape(), grad)? })
}

/// Per-class sums behind the soft Dice coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceTerms {
    /// `Σ p g`
    pub intersection: Vec<f64>,
    /// `Σ p²`
    pub pred_sq: Vec<f64>,
    /// `Σ g²`
    pub target_sq: Vec<f64>,
}

impl DiceTerms {
    /// `d_c = (2 Σ p g + ε) / (Σ p² + Σ g² + ε)`, with `d_c = 1` when the
    /// denominator vanishes.
    pub fn coefficients(&self, eps: f64) -> Vec<f64> {
        (0..self.intersection.len())
            .map(|k| {
                let den = self.pred_sq[k] + self.target_sq[k] + eps;
                if den == 0.0 {
                    1.0
                } else {
                    (2.0 * self.intersection[k] + eps) / den
                }
            })
            .collect()
    }
}

fn dice_terms<T: Scalar>(p: &[T], g: &[T], dims: [usize; 5]) -> DiceTerms {
    let [n, c, d, h, w] = dims;
    let vol = d * h * w;
    let mut t = DiceTerms { intersection: vec![0.0; c], pred_sq: vec![0.0; c], target_sq: vec![0.0; c] };
    for b in 0..n {
        for k in 0..c {
            let base = (b * c + k) * vol;
            let (mut i, mut pp, mut gg) = (CompensatedSum::default(), CompensatedSum::default(), CompensatedSum::default());
            for (&pv, &gv) in p[base..base + vol].iter().zip(&g[base..base + vol]) {
                let (pv, gv) = (pv.to_f64(), gv.to_f64());
                i.add(pv * gv);
                pp.add(pv * pv);
                gg.add(gv * gv);
            }
            t.intersection[k] += i.value();
            t.pred_sq[k] += pp.value();
            t.target_sq[k] += gg.value();
        }
    }
    t
}

/// Soft Dice coefficient of every class.
pub fn soft_dice_per_class<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<Vec<f64>> {
    let dims = check_pair(probs, target, "soft_dice")?;
    Ok(dice_terms(probs.data(), target.data(), dims).coefficients(eps))
}

/// `L = 1 − (1/C) Σ_c d_c` over all classes, background included.
///
/// Returns the gradient with respect to the probabilities.
pub fn soft_dice_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<LossOutput<T>> {
    const TOL: f64 = 1e-6;
    let dims = check_pair(probs, target, "soft_dice_loss")?;
    if let Some(i) = probs.data().iter().position(|&x| {
        let x = x.to_f64();
        !(x >= -TOL && x <= 1.0 + TOL)
    }) {
        return Err(Error::Input(format!("probability {:?} at index {i} is outside [0, 1]", probs.data()[i])));
    }
    let [n, c, d, h, w] = dims;
    let vol = d * h * w;
    let terms = dice_terms(probs.data(), target.data(), dims);
    let coeffs = terms.coefficients(eps);
    let loss = 1.0 - coeffs.iter().sum::<f64>() / c as f64;

    // ∂d_c/∂p = (2g·den − num·2p) / den²
    let scale: Vec<(f64, f64)> = (0..c)
        .map(|k| {
            let den = terms.pred_sq[k] + terms.target_sq[k] + eps;
            if den == 0.0 {
                (0.0, 0.0)
            } else {
                let num = 2.0 * terms.intersection[k] + eps;
                (2.0 / den, 2.0 * num / (den * den))
            }
        })
        .collect();
    let inv_c = 1.0 / c as f64;
    let (p, g) = (probs.data(), target.data());
    let mut grad = vec![T::ZERO; p.len()];
    for b in 0..n {
        for (k, &(a, bq)) in scale.iter().enumerate() {
            let base = (b * c + k) * vol;
            for i in base..base + vol {
                grad[i] = T::from_f64(-inv_c * (a * g[i].to_f64() - bq * p[i].to_f64()));
            }
        }
    }
    Ok(LossOutput { loss, grad: Tensor::from_vec(probs.shape(), grad)? })
}

/// Soft Dice on `softmax(logits)`, with the gradient carried back to the
/// logits.
pub fn soft_dice_loss_logits<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<LossOutput<T>> {
    let p = softmax_channels(logits)?;
    let out = soft_dice_loss(&p, target, eps)?;
    Ok(LossOutput { loss: out.loss, grad: softmax_channels_backward(&p, &out.grad)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brainstem_frequencies() {
        let w = ClassWeights::from_frequencies(&[0.916, 0.05, 0.0225, 0.011, 0.0008]).unwrap();
        assert_eq!(w.0[0], 1.0);
        assert!((w.0[1] - 18.32).abs() < 0.01);
        assert!((w.0[4] - 1145.0).abs() < 1.0);
        assert!(matches!(ClassWeights::from_frequencies(&[0.5, 0.0]), Err(Error::AbsentClass { class: 1 })));
    }

    #[test]
    fn uniform_logits() {
        let z = Tensor::<f64>::zeros(&[1, 5, 1, 1, 1]);
        let mut g = Tensor::zeros(&[1, 5, 1, 1, 1]);
        g.data_mut()[2] = 1.0;
        let out = weighted_cross_entropy(&z, &g, &ClassWeights::uniform(5)).unwrap();
        assert!((out.loss + libm::log(0.2)).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction() {
        let mut z = Tensor::<f64>::zeros(&[1, 5, 1, 1, 1]);
        z.data_mut()[3] = 50.0;
        let mut g = Tensor::zeros(&[1, 5, 1, 1, 1]);
        g.data_mut()[3] = 1.0;
        let out = weighted_cross_entropy(&z, &g, &ClassWeights(vec![1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        assert!(out.loss < 1e-6);
    }

    #[test]
    fn non_one_hot_target_rejected() {
        let z = Tensor::<f64>::zeros(&[1, 2, 1, 1, 1]);
        let g = Tensor::full(&[1, 2, 1, 1, 1], 0.5);
        assert!(weighted_cross_entropy(&z, &g, &ClassWeights::uniform(2)).is_err());
        assert!(weighted_cross_entropy_soft(&z, &g, &ClassWeights::uniform(2)).is_ok());
    }

    #[test]
    fn dice_hand_case() {
        let p = Tensor::<f64>::from_vec(&[1, 2, 1, 1, 1], vec![0.5, 0.5]).unwrap();
        let g = Tensor::from_vec(&[1, 2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
        let d = soft_dice_per_class(&p, &g, 0.0).unwrap();
        assert!((d[0] - 0.8).abs() < 1e-15 && d[1] == 0.0);
        assert!((soft_dice_loss(&p, &g, 0.0).unwrap().loss - 0.6).abs() < 1e-15);
    }

    #[test]
    fn dice_perfect_prediction() {
        let g = Tensor::<f64>::from_vec(&[1, 2, 1, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(soft_dice_loss(&g, &g, 0.0).unwrap().loss, 0.0);
    }

    #[test]
    fn dice_rejects_out_of_range() {
        let p = Tensor::<f64>::from_vec(&[1, 2, 1, 1, 1], vec![1.5, -0.5]).unwrap();
        assert!(soft_dice_loss(&p, &p, 0.0).is_err());
    }
}
