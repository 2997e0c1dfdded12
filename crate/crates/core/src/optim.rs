//! Stochastic gradient descent with classic momentum.

use alloc::format;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `v ← μ·v − lr·g; w ← w + v`
pub fn sgd_momentum_step<T: Scalar>(
    w: &mut Tensor<T>,
    g: &Tensor<T>,
    v: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if w.shape() != g.shape() || w.shape() != v.shape() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!("parameter {:?}, gradient {:?}, velocity {:?}", w.shape(), g.shape(), v.shape()),
        ));
    }
    let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
    for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
        *vi = mu * *vi - lr * gi;
        *wi += *vi;
    }
    Ok(())
}
