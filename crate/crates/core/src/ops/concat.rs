use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[N,Ca,..] ++ [N,Cb,..] -> [N,Ca+Cb,..]` with `a`'s channels first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let [na, ca, da, ha, wa] = a.dims5(OP)?;
    let [nb, cb, db, hb, wb] = b.dims5(OP)?;
    if na != nb || [da, ha, wa] != [db, hb, wb] {
        return Err(Error::shape(
            OP,
            format!("batch/spatial extents differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let vol = da * ha * wa;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        out.extend_from_slice(&a.data()[n * ca * vol..(n + 1) * ca * vol]);
        out.extend_from_slice(&b.data()[n * cb * vol..(n + 1) * cb * vol]);
    }
    Tensor::from_vec(&[na, ca + cb, da, ha, wa], out)
}

/// Inverse of [`concat_channels`]: the first `ca` channels go to the first
/// tensor, the remainder to the second.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "split_channels";
    let [n, c, d, h, w] = g.dims5(OP)?;
    if ca > c {
        return Err(Error::shape(OP, format!("cannot take {ca} of {c} channels")));
    }
    let vol = d * h * w;
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * vol);
    let mut b = Vec::with_capacity(n * cb * vol);
    for i in 0..n {
        let s = &g.data()[i * c * vol..(i + 1) * c * vol];
        a.extend_from_slice(&s[..ca * vol]);
        b.extend_from_slice(&s[ca * vol..]);
    }
    Ok((Tensor::from_vec(&[n, ca, d, h, w], a)?, Tensor::from_vec(&[n, cb, d, h, w], b)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channels_of_a_come_first() {
        let a = Tensor::<f32>::full(&[1, 2, 2, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[1, 3, 2, 2, 2], 2.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 5, 2, 2, 2]);
        assert!(c.data()[..16].iter().all(|&v| v == 1.0));
        assert!(c.data()[16..].iter().all(|&v| v == 2.0));
        let (ga, gb) = split_channels(&c, 2).unwrap();
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let a = Tensor::<f32>::zeros(&[1, 2, 2, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 2, 2, 2, 4]);
        assert!(matches!(concat_channels(&a, &b), Err(Error::Shape { .. })));
    }
}
