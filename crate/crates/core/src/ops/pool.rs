//! Non-overlapping 3D max pooling.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PoolOutput<T> {
    pub y: Tensor<T>,
    /// Flat index into the input tensor of the element each output took.
    pub argmax: Vec<usize>,
}

/// Max over disjoint `window³` blocks (stride = window). Ties go to the
/// lowest linear index within the block.
pub fn maxpool3d_forward<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<PoolOutput<T>> {
    const OP: &str = "maxpool3d_forward";
    let [n, c, d, h, w] = x.dims5(OP)?;
    if window == 0 {
        return Err(Error::Config("pooling window must be ≥ 1".into()));
    }
    if d % window != 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Config(format!(
            "spatial extents {:?} are not divisible by the pooling window {window}",
            [d, h, w]
        )));
    }
    let (od, oh, ow) = (d / window, h / window, w / window);
    let xs = x.data();
    let mut y = Vec::with_capacity(n * c * od * oh * ow);
    let mut argmax = Vec::with_capacity(y.capacity());
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best_i = base + ((zd * window) * h + zh * window) * w + zw * window;
                    let mut best = xs[best_i];
                    for a in 0..window {
                        for b in 0..window {
                            let row = base + ((zd * window + a) * h + zh * window + b) * w + zw * window;
                            for e in 0..window {
                                let v = xs[row + e];
                                if v > best {
                                    best = v;
                                    best_i = row + e;
                                }
                            }
                        }
                    }
                    y.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok(PoolOutput { y: Tensor::from_vec(&[n, c, od, oh, ow], y)?, argmax })
}

/// Routes each output gradient to the input element recorded in `argmax`.
pub fn maxpool3d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_y: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_y.len() {
        return Err(Error::shape(
            "maxpool3d_backward",
            format!("{} argmax entries for {} gradients", argmax.len(), grad_y.len()),
        ));
    }
    let mut gx = Tensor::zeros(input_shape);
    let total = gx.len();
    let g = gx.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_y.data()) {
        if i >= total {
            return Err(Error::shape("maxpool3d_backward", format!("argmax {i} out of range")));
        }
        g[i] += v;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn block_max_and_routing() {
        // Block holds 1..=8 in a scrambled order; 8 sits at linear index 5.
        let vals = vec![3.0f32, 1.0, 7.0, 2.0, 6.0, 8.0, 4.0, 5.0];
        let x = Tensor::from_vec(&[1, 1, 2, 2, 2], vals).unwrap();
        let out = maxpool3d_forward(&x, 2).unwrap();
        assert_eq!(out.y.data(), &[8.0]);
        assert_eq!(out.argmax, vec![5]);
        let g = maxpool3d_backward(x.shape(), &out.argmax, &Tensor::full(&[1, 1, 1, 1, 1], 1.5)).unwrap();
        let mut expected = vec![0.0f32; 8];
        expected[5] = 1.5;
        assert_eq!(g.data(), expected.as_slice());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let x = Tensor::<f64>::full(&[1, 2, 4, 4, 4], 0.5);
        let out = maxpool3d_forward(&x, 2).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 0.5));
        let g = maxpool3d_backward(x.shape(), &out.argmax, &Tensor::full(out.y.shape(), 1.0)).unwrap();
        let [_, _, d, h, w] = [1, 2, 4, 4, 4];
        for (i, &v) in g.data().iter().enumerate() {
            let (z, y, xx) = ((i / (h * w)) % d, (i / w) % h, i % w);
            let corner = z % 2 == 0 && y % 2 == 0 && xx % 2 == 0;
            assert_eq!(v, if corner { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn odd_extent_is_a_config_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 5, 4]);
        assert!(matches!(maxpool3d_forward(&x, 2), Err(Error::Config(_))));
    }
}
