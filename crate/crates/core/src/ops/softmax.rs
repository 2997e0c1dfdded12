use alloc::vec;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-voxel softmax over the channel axis, stabilized by subtracting the
/// channel maximum.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5("softmax_channels")?;
    let vol = d * h * w;
    let xs = x.data();
    let mut p = vec![T::ZERO; x.len()];
    for b in 0..n {
        let base = b * c * vol;
        for v in 0..vol {
            let mut m = xs[base + v];
            for k in 1..c {
                m = m.max(xs[base + k * vol + v]);
            }
            let mut z = T::ZERO;
            for k in 0..c {
                let e = (xs[base + k * vol + v] - m).exp();
                p[base + k * vol + v] = e;
                z += e;
            }
            let inv = T::ONE / z;
            for k in 0..c {
                p[base + k * vol + v] *= inv;
            }
        }
    }
    Tensor::from_vec(x.shape(), p)
}

/// Given `p = softmax(x)` and `∂L/∂p`, returns
/// `∂L/∂x_c = p_c (∂L/∂p_c − Σ_k p_k ∂L/∂p_k)`.
pub fn softmax_channels_backward<T: Scalar>(p: &Tensor<T>, grad_p: &Tensor<T>) -> Result<Tensor<T>> {
    p.check_same_shape(grad_p, "softmax_channels_backward")?;
    let [n, c, d, h, w] = p.dims5("softmax_channels_backward")?;
    let vol = d * h * w;
    let (ps, gs) = (p.data(), grad_p.data());
    let mut gx = vec![T::ZERO; p.len()];
    for b in 0..n {
        let base = b * c * vol;
        for v in 0..vol {
            let mut dot = T::ZERO;
            for k in 0..c {
                dot += ps[base + k * vol + v] * gs[base + k * vol + v];
            }
            for k in 0..c {
                let i = base + k * vol + v;
                gx[i] = ps[i] * (gs[i] - dot);
            }
        }
    }
    Tensor::from_vec(p.shape(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_are_uniform() {
        let p = softmax_channels(&Tensor::<f64>::full(&[1, 5, 2, 2, 2], 3.0)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn large_margin_saturates_without_overflow() {
        let x = Tensor::from_vec(&[1, 3, 1, 1, 1], vec![1000.0f32, -1000.0, 0.0]).unwrap();
        let p = softmax_channels(&x).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-6);
        assert!(p.data()[1] < 1e-6 && p.data()[2] < 1e-6);
    }

    #[test]
    fn shift_invariant() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 2, 3, 2], |i| ((i * 37) % 11) as f64 * 0.3);
        let p0 = softmax_channels(&x).unwrap();
        let p1 = softmax_channels(&x.map(|v| v + 7.5)).unwrap();
        assert!(p0.max_abs_diff(&p1) < 1e-6);
    }
}
