//! Transposed (fractionally strided) 3D convolution, used for learned
//! upsampling.
//!
//! Weights are laid out `[in, out, kd, kh, kw]`. Input voxel `i` scatters
//! into output `i·s + k − p` for every tap `k`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::conv::ConvGrads;
use super::ConvSpec;
use crate::error::{Error, Result};
use crate::parallel::map_tasks;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output coordinate of input `i` under tap `k`, if it lands inside.
#[inline(always)]
fn dst_index(i: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let p = i * stride + k;
    if p < pad || p - pad >= extent {
        None
    } else {
        Some(p - pad)
    }
}

fn check<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec, op: &'static str) -> Result<([usize; 5], [usize; 3])> {
    spec.validate()?;
    let dims = x.dims5(op)?;
    if dims[1] != spec.in_channels {
        return Err(Error::shape(
            op,
            format!("input has {} channels, spec expects {}", dims[1], spec.in_channels),
        ));
    }
    if w.shape() != spec.transposed_weight_shape() {
        return Err(Error::shape(
            op,
            format!("weight shape {:?}, expected {:?}", w.shape(), spec.transposed_weight_shape()),
        ));
    }
    let out = spec.transposed_output([dims[2], dims[3], dims[4]])?;
    Ok((dims, out))
}

pub fn transposed_conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    const OP: &str = "transposed_conv3d_forward";
    let (dims, out) = check(x, w, spec, OP)?;
    if b.shape() != [spec.out_channels] {
        return Err(Error::shape(
            OP,
            format!("bias shape {:?}, expected [{}]", b.shape(), spec.out_channels),
        ));
    }
    let [n, ci, d, h, wd] = dims;
    let co = spec.out_channels;
    let [kd, kh, kw] = spec.kernel;
    let taps = kd * kh * kw;
    let (xs, ws) = (x.data(), w.data());
    let ovol = out[0] * out[1] * out[2];
    let ivol = d * h * wd;

    // One task per (batch, output channel); rows of the input are combined
    // across input channels into a contiguous buffer, then scattered.
    let planes = map_tasks(n * co, |t| {
        let (ni, o) = (t / co, t % co);
        let mut y = vec![b.data()[o]; ovol];
        let mut row = vec![T::ZERO; wd];
        for id in 0..d {
            for ih in 0..h {
                for dz in 0..kd {
                    let Some(od) = dst_index(id, dz, spec.stride[0], spec.padding[0], out[0]) else { continue };
                    for dy in 0..kh {
                        let Some(oh) = dst_index(ih, dy, spec.stride[1], spec.padding[1], out[1]) else { continue };
                        for dx in 0..kw {
                            row.iter_mut().for_each(|v| *v = T::ZERO);
                            let tap = (dz * kh + dy) * kw + dx;
                            for i in 0..ci {
                                let wv = ws[(i * co + o) * taps + tap];
                                let xr = &xs[(ni * ci + i) * ivol + (id * h + ih) * wd..][..wd];
                                for (r, &xv) in row.iter_mut().zip(xr) {
                                    *r = wv.mul_add(xv, *r);
                                }
                            }
                            let yrow = (od * out[1] + oh) * out[2];
                            for (iw, &r) in row.iter().enumerate() {
                                if let Some(ow) = dst_index(iw, dx, spec.stride[2], spec.padding[2], out[2]) {
                                    y[yrow + ow] += r;
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    });
    let data: Vec<T> = planes.into_iter().flatten().collect();
    Tensor::from_vec(&[n, co, out[0], out[1], out[2]], data)
}

pub fn transposed_conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_y: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    const OP: &str = "transposed_conv3d_backward";
    let (dims, out) = check(x, w, spec, OP)?;
    let [n, ci, d, h, wd] = dims;
    let co = spec.out_channels;
    let expected = [n, co, out[0], out[1], out[2]];
    if grad_y.shape() != expected {
        return Err(Error::shape(
            OP,
            format!("output gradient shape {:?}, expected {expected:?}", grad_y.shape()),
        ));
    }
    let [kd, kh, kw] = spec.kernel;
    let taps = kd * kh * kw;
    let (xs, ws, gs) = (x.data(), w.data(), grad_y.data());
    let ovol = out[0] * out[1] * out[2];
    let ivol = d * h * wd;

    // gathered[(o, tap)][input voxel] = grad_y at the voxel that input voxel
    // feeds under that tap (0 where it falls outside).
    let gather = |ni: usize| -> Vec<T> {
        let mut g = vec![T::ZERO; co * taps * ivol];
        for o in 0..co {
            let gbase = (ni * co + o) * ovol;
            for dz in 0..kd {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let tap = (dz * kh + dy) * kw + dx;
                        let dst = &mut g[(o * taps + tap) * ivol..][..ivol];
                        for id in 0..d {
                            let Some(od) = dst_index(id, dz, spec.stride[0], spec.padding[0], out[0]) else { continue };
                            for ih in 0..h {
                                let Some(oh) = dst_index(ih, dy, spec.stride[1], spec.padding[1], out[1]) else { continue };
                                let grow = gbase + (od * out[1] + oh) * out[2];
                                for iw in 0..wd {
                                    if let Some(ow) = dst_index(iw, dx, spec.stride[2], spec.padding[2], out[2]) {
                                        dst[(id * h + ih) * wd + iw] = gs[grow + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        g
    };
    let gathered: Vec<Vec<T>> = (0..n).map(gather).collect();

    // Input gradient: per (batch, input channel) plane.
    let gx_planes = map_tasks(n * ci, |t| {
        let (ni, i) = (t / ci, t % ci);
        let mut gx = vec![T::ZERO; ivol];
        for o in 0..co {
            for tap in 0..taps {
                let wv = ws[(i * co + o) * taps + tap];
                let g = &gathered[ni][(o * taps + tap) * ivol..][..ivol];
                for (a, &gv) in gx.iter_mut().zip(g) {
                    *a = wv.mul_add(gv, *a);
                }
            }
        }
        gx
    });
    let grad_x = Tensor::from_vec(&dims, gx_planes.into_iter().flatten().collect())?;

    // Weight gradient: per input channel, all (o, tap) dot products.
    let gw_rows = map_tasks(ci, |i| {
        let mut row = vec![T::ZERO; co * taps];
        for (ot, r) in row.iter_mut().enumerate() {
            let mut s = 0.0f64;
            for ni in 0..n {
                let xr = &xs[(ni * ci + i) * ivol..][..ivol];
                let g = &gathered[ni][ot * ivol..][..ivol];
                let mut acc = T::ZERO;
                for (&xv, &gv) in xr.iter().zip(g) {
                    acc = xv.mul_add(gv, acc);
                }
                s += acc.to_f64();
            }
            *r = T::from_f64(s);
        }
        row
    });
    let grad_w = Tensor::from_vec(&spec.transposed_weight_shape(), gw_rows.into_iter().flatten().collect())?;

    let mut gb = vec![0.0f64; co];
    for ni in 0..n {
        for (o, acc) in gb.iter_mut().enumerate() {
            *acc += gs[(ni * co + o) * ovol..][..ovol].iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    let grad_b = Tensor::from_vec(&[co], gb.into_iter().map(T::from_f64).collect())?;
    Ok(ConvGrads { grad_x, grad_w, grad_b })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_fills_block() {
        let x = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![2.5f32]).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let y = transposed_conv3d_forward(&x, &w, &Tensor::zeros(&[1]), &ConvSpec::up2(1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn zeros_in_zeros_out() {
        let spec = ConvSpec::up2(3, 2);
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 3, 4]);
        let w = Tensor::from_fn(&spec.transposed_weight_shape(), |i| i as f64);
        let y = transposed_conv3d_forward(&x, &w, &Tensor::zeros(&[2]), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 6, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubles_extents() {
        let spec = ConvSpec::up2(2, 1);
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3, 3]);
        let y = transposed_conv3d_forward(&x, &Tensor::zeros(&spec.transposed_weight_shape()), &Tensor::zeros(&[1]), &spec)
            .unwrap();
        assert_eq!(&y.shape()[2..], &[6, 6, 6]);
    }

    #[test]
    fn rejects_conv_weight_layout() {
        let spec = ConvSpec::up2(2, 3);
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2, 2]);
        let err = transposed_conv3d_forward(&x, &Tensor::zeros(&spec.weight_shape()), &Tensor::zeros(&[3]), &spec).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
