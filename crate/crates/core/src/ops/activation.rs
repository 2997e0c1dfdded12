use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if !(*v > T::ZERO) {
            *v = T::ZERO;
        }
    }
}

/// Passes the gradient where `x > 0`; the derivative at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_same_shape(grad_y, "relu_backward")?;
    let mut g = grad_y.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if !(xv > T::ZERO) {
            *gv = T::ZERO;
        }
    }
    Ok(g)
}

/// Same mask computed from the activation output (`y > 0` iff `x > 0`).
pub fn relu_backward_from_output<T: Scalar>(y: &Tensor<T>, grad_y: &mut Tensor<T>) -> Result<()> {
    y.check_same_shape(grad_y, "relu_backward")?;
    for (gv, &yv) in grad_y.data_mut().iter_mut().zip(y.data()) {
        if !(yv > T::ZERO) {
            *gv = T::ZERO;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negatives() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, 2.0, 0.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn gradient_mask_is_positive_indicator() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 3, 3], |i| ((i * 7919) % 13) as f64 - 6.0);
        let g = relu_backward(&x, &Tensor::full(x.shape(), 1.0)).unwrap();
        for (&gv, &xv) in g.data().iter().zip(x.data()) {
            assert_eq!(gv, if xv > 0.0 { 1.0 } else { 0.0 });
        }
        let mut g2 = Tensor::full(x.shape(), 1.0);
        relu_backward_from_output(&relu_forward(&x), &mut g2).unwrap();
        assert_eq!(g, g2);
    }
}
