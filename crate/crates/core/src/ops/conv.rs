//! 3D convolution.
//!
//! Stride-1 convolutions (every convolution in the network) run through a
//! register-blocked direct kernel over a zero-padded copy of the input: a
//! block of output channels times a run of `LANES` output voxels is
//! accumulated in registers across all input channels and taps. Other
//! strides use plain loops.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::ConvSpec;
use crate::error::{Error, Result};
use crate::parallel::map_tasks;
use crate::scalar::Scalar;
use crate::simd::{GradGeom, TapTable, LANES};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_w: Tensor<T>,
    pub grad_b: Tensor<T>,
}

fn check_input<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec, op: &'static str) -> Result<[usize; 5]> {
    spec.validate()?;
    let dims = x.dims5(op)?;
    if dims[1] != spec.in_channels {
        return Err(Error::shape(
            op,
            format!("input has {} channels, spec expects {}", dims[1], spec.in_channels),
        ));
    }
    Ok(dims)
}

fn check_weight<T: Scalar>(w: &Tensor<T>, spec: &ConvSpec, op: &'static str) -> Result<()> {
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape(
            op,
            format!("weight shape {:?}, expected {:?}", w.shape(), spec.weight_shape()),
        ));
    }
    Ok(())
}

fn check_grad<T: Scalar>(
    grad_y: &Tensor<T>,
    n: usize,
    spec: &ConvSpec,
    out: [usize; 3],
    op: &'static str,
) -> Result<()> {
    let expected = [n, spec.out_channels, out[0], out[1], out[2]];
    if grad_y.shape() != expected {
        return Err(Error::shape(
            op,
            format!("output gradient shape {:?}, expected {expected:?}", grad_y.shape()),
        ));
    }
    Ok(())
}

/// `y[n,co] = b[co] + Σ_ci Σ_k w[co,ci,k] · x_pad[n,ci, s·o + k]`
pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    const OP: &str = "conv3d_forward";
    let dims = check_input(x, spec, OP)?;
    check_weight(w, spec, OP)?;
    if b.shape() != [spec.out_channels] {
        return Err(Error::shape(
            OP,
            format!("bias shape {:?}, expected [{}]", b.shape(), spec.out_channels),
        ));
    }
    let out = spec.conv_output([dims[2], dims[3], dims[4]])?;
    if spec.stride == [1; 3] {
        Ok(forward_stride1(x.data(), dims, w.data(), b.data(), spec, out))
    } else {
        Ok(forward_general(x.data(), dims, w.data(), b.data(), spec, out))
    }
}

/// All three gradients of [`conv3d_forward`].
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_y: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let (grad_w, grad_b) = conv3d_backward_params(x, grad_y, spec)?;
    let dims = x.dims5("conv3d_backward")?;
    let grad_x = conv3d_backward_input(w, grad_y, spec, [dims[2], dims[3], dims[4]])?;
    Ok(ConvGrads { grad_x, grad_w, grad_b })
}

/// Gradient with respect to the input only.
pub fn conv3d_backward_input<T: Scalar>(
    w: &Tensor<T>,
    grad_y: &Tensor<T>,
    spec: &ConvSpec,
    input_extent: [usize; 3],
) -> Result<Tensor<T>> {
    const OP: &str = "conv3d_backward";
    check_weight(w, spec, OP)?;
    let out = spec.conv_output(input_extent)?;
    let gdims = grad_y.dims5(OP)?;
    check_grad(grad_y, gdims[0], spec, out, OP)?;

    let fits_flip = (0..3).all(|a| spec.padding[a] < spec.kernel[a]);
    if spec.stride == [1; 3] && fits_flip {
        // Input gradient of a stride-1 convolution is a stride-1 convolution
        // of the output gradient with the flipped, channel-swapped kernel.
        let [co, ci, kd, kh, kw] = spec.weight_shape();
        let taps = kd * kh * kw;
        let mut flipped = vec![T::ZERO; w.len()];
        let src = w.data();
        for o in 0..co {
            for i in 0..ci {
                for t in 0..taps {
                    flipped[(i * co + o) * taps + (taps - 1 - t)] = src[(o * ci + i) * taps + t];
                }
            }
        }
        let flip_spec = ConvSpec {
            kernel: spec.kernel,
            stride: [1; 3],
            padding: [kd - 1 - spec.padding[0], kh - 1 - spec.padding[1], kw - 1 - spec.padding[2]],
            in_channels: co,
            out_channels: ci,
        };
        let zero_bias = vec![T::ZERO; ci];
        let gx = forward_stride1(grad_y.data(), gdims, &flipped, &zero_bias, &flip_spec, input_extent);
        debug_assert_eq!(&gx.shape()[2..], &input_extent);
        Ok(gx)
    } else {
        Ok(backward_input_general(w.data(), grad_y.data(), gdims[0], spec, input_extent, out))
    }
}

/// Gradients with respect to the weights and bias.
pub fn conv3d_backward_params<T: Scalar>(
    x: &Tensor<T>,
    grad_y: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "conv3d_backward";
    let dims = check_input(x, spec, OP)?;
    let out = spec.conv_output([dims[2], dims[3], dims[4]])?;
    check_grad(grad_y, dims[0], spec, out, OP)?;

    let grad_b = bias_grad(grad_y.data(), dims[0], spec.out_channels, out.iter().product());
    let grad_w = if spec.stride == [1; 3] {
        weight_grad_stride1(x.data(), dims, grad_y.data(), spec, out)
    } else {
        weight_grad_general(x.data(), dims, grad_y.data(), spec, out)
    };
    Ok((
        Tensor::from_vec(&spec.weight_shape(), grad_w)?,
        Tensor::from_vec(&[spec.out_channels], grad_b)?,
    ))
}

fn bias_grad<T: Scalar>(gy: &[T], n: usize, co: usize, vol: usize) -> Vec<T> {
    let mut out = vec![0.0f64; co];
    for b in 0..n {
        for (c, acc) in out.iter_mut().enumerate() {
            let s = &gy[(b * co + c) * vol..][..vol];
            *acc += s.iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    out.into_iter().map(T::from_f64).collect()
}

/// Zero-padded copy of one batch element, `[ci][D+2pd][H+2ph][W+2pw]`, with
/// `LANES + kw` trailing elements so vector reads past a row end stay in
/// bounds.
fn pad_input<T: Scalar>(x: &[T], c: usize, ext: [usize; 3], pad: [usize; 3], slack: usize) -> (Vec<T>, [usize; 3]) {
    let p = [ext[0] + 2 * pad[0], ext[1] + 2 * pad[1], ext[2] + 2 * pad[2]];
    let mut buf = vec![T::ZERO; c * p[0] * p[1] * p[2] + slack];
    for ch in 0..c {
        for d in 0..ext[0] {
            for h in 0..ext[1] {
                let src = ((ch * ext[0] + d) * ext[1] + h) * ext[2];
                let dst = ((ch * p[0] + d + pad[0]) * p[1] + h + pad[1]) * p[2] + pad[2];
                buf[dst..dst + ext[2]].copy_from_slice(&x[src..src + ext[2]]);
            }
        }
    }
    (buf, p)
}

/// Output-channel blocks `(start, width)` with widths drawn from {8, 4, 1}.
fn channel_blocks(co: usize) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < co {
        let width = match co - start {
            r if r >= 8 => 8,
            r if r >= 4 => 4,
            _ => 1,
        };
        blocks.push((start, width));
        start += width;
    }
    blocks
}

fn forward_stride1<T: Scalar>(
    x: &[T],
    dims: [usize; 5],
    w: &[T],
    b: &[T],
    spec: &ConvSpec,
    out: [usize; 3],
) -> Tensor<T> {
    let [n, ci, d, h, wd] = dims;
    let co = spec.out_channels;
    let taps = spec.kernel_volume();
    let slack = LANES + spec.kernel[2];
    let padded: Vec<(Vec<T>, [usize; 3])> =
        (0..n).map(|i| pad_input(&x[i * ci * d * h * wd..][..ci * d * h * wd], ci, [d, h, wd], spec.padding, slack)).collect();

    let tables: Vec<TapTable> = padded.iter().map(|(_, p)| tap_table(ci, spec.kernel, *p)).collect();

    // Repacked weights per block: [ci][tap][lane-in-block].
    let blocks = channel_blocks(co);
    let packed: Vec<Vec<T>> = blocks
        .iter()
        .map(|&(start, width)| {
            let mut p = vec![T::ZERO; ci * taps * width];
            for c in 0..width {
                for i in 0..ci {
                    for t in 0..taps {
                        p[(i * taps + t) * width + c] = w[((start + c) * ci + i) * taps + t];
                    }
                }
            }
            p
        })
        .collect();

    let plane = out[1] * out[2];
    let tasks = n * blocks.len() * out[0];
    let results = map_tasks(tasks, |t| {
        let od = t % out[0];
        let bi = (t / out[0]) % blocks.len();
        let ni = t / (out[0] * blocks.len());
        let (start, width) = blocks[bi];
        let (xp, pdims) = &padded[ni];
        let mut buf = vec![T::ZERO; width * plane];
        let args = PlaneArgs { xp, pdims: *pdims, taps: &tables[ni], od, out_hw: [out[1], out[2]] };
        match width {
            8 => conv_plane::<T, 8>(&args, &packed[bi], &b[start..start + 8], &mut buf),
            4 => conv_plane::<T, 4>(&args, &packed[bi], &b[start..start + 4], &mut buf),
            _ => conv_plane::<T, 1>(&args, &packed[bi], &b[start..start + 1], &mut buf),
        }
        buf
    });

    let vol = out[0] * plane;
    let mut y = vec![T::ZERO; n * co * vol];
    for (t, buf) in results.into_iter().enumerate() {
        let od = t % out[0];
        let bi = (t / out[0]) % blocks.len();
        let ni = t / (out[0] * blocks.len());
        let (start, width) = blocks[bi];
        for c in 0..width {
            let dst = ((ni * co + start + c) * out[0] + od) * plane;
            y[dst..dst + plane].copy_from_slice(&buf[c * plane..(c + 1) * plane]);
        }
    }
    Tensor::from_vec(&[n, co, out[0], out[1], out[2]], y).expect("conv output shape")
}

struct PlaneArgs<'a, T> {
    xp: &'a [T],
    pdims: [usize; 3],
    taps: &'a TapTable,
    od: usize,
    out_hw: [usize; 2],
}

/// Flat offsets of every `(input channel, tap)` relative to a tile origin,
/// in the order the packed weights use.
fn tap_table(ci: usize, kernel: [usize; 3], pdims: [usize; 3]) -> TapTable {
    let [kd, kh, kw] = kernel;
    let plane = pdims[1] * pdims[2];
    let chan = pdims[0] * plane;
    let mut offsets = Vec::with_capacity(ci * kd * kh * kw);
    for i in 0..ci {
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    offsets.push(i * chan + dz * plane + dy * pdims[2] + dx);
                }
            }
        }
    }
    let reach = offsets.iter().copied().max().unwrap_or(0);
    TapTable { offsets, reach }
}

/// One output depth plane for a block of `CB` output channels.
#[inline(always)]
fn conv_plane<T: Scalar, const CB: usize>(a: &PlaneArgs<'_, T>, wblk: &[T], bias: &[T], out: &mut [T]) {
    let [_, hp, wp] = a.pdims;
    let [ho_n, wo_n] = a.out_hw;
    let plane = hp * wp;
    for ho in 0..ho_n {
        let mut w0 = 0;
        while w0 < wo_n {
            let valid = LANES.min(wo_n - w0);
            let mut acc = [[T::ZERO; LANES]; CB];
            for c in 0..CB {
                acc[c] = [bias[c]; LANES];
            }
            T::conv_tile::<CB>(a.xp, a.od * plane + ho * wp + w0, a.taps, wblk, &mut acc);
            for c in 0..CB {
                let dst = (c * ho_n + ho) * wo_n + w0;
                out[dst..dst + valid].copy_from_slice(&acc[c][..valid]);
            }
            w0 += LANES;
        }
    }
}

fn weight_grad_stride1<T: Scalar>(
    x: &[T],
    dims: [usize; 5],
    gy: &[T],
    spec: &ConvSpec,
    out: [usize; 3],
) -> Vec<T> {
    let [n, ci, d, h, wd] = dims;
    let co = spec.out_channels;
    let [kd, kh, kw] = spec.kernel;
    let taps = kd * kh * kw;
    let slack = LANES + kw;
    let padded: Vec<(Vec<T>, [usize; 3])> =
        (0..n).map(|i| pad_input(&x[i * ci * d * h * wd..][..ci * d * h * wd], ci, [d, h, wd], spec.padding, slack)).collect();

    let blocks: Vec<(usize, usize)> = {
        let mut v = Vec::new();
        let mut s = 0;
        while s < co {
            let width = if co - s >= 4 { 4 } else { 1 };
            v.push((s, width));
            s += width;
        }
        v
    };
    let vol = out[0] * out[1] * out[2];

    // Task = (block, input channel); each yields `width × taps` sums.
    let results = map_tasks(blocks.len() * ci, |t| {
        let (start, width) = blocks[t / ci];
        let i = t % ci;
        let mut sums = vec![T::ZERO; width * taps];
        let mut part = vec![T::ZERO; width * kw];
        for (ni, (xp, pdims)) in padded.iter().enumerate() {
            let g = &gy[(ni * co + start) * vol..(ni * co + start + width) * vol];
            let chan = pdims[0] * pdims[1] * pdims[2];
            let geom = GradGeom { pdims: *pdims, channel_base: i * chan, out, vol };
            for dz in 0..kd {
                for dy in 0..kh {
                    part.iter_mut().for_each(|v| *v = T::ZERO);
                    match (width, kw) {
                        (4, 3) => T::grad_taps::<4, 3>(&geom, xp, g, dz, dy, &mut part),
                        (1, 3) => T::grad_taps::<1, 3>(&geom, xp, g, dz, dy, &mut part),
                        (4, 1) => T::grad_taps::<4, 1>(&geom, xp, g, dz, dy, &mut part),
                        (1, 1) => T::grad_taps::<1, 1>(&geom, xp, g, dz, dy, &mut part),
                        _ => grad_taps_any(&geom, xp, g, width, kw, dz, dy, &mut part),
                    }
                    for c in 0..width {
                        for dx in 0..kw {
                            sums[c * taps + (dz * kh + dy) * kw + dx] += part[c * kw + dx];
                        }
                    }
                }
            }
        }
        sums
    });

    let mut gw = vec![T::ZERO; co * ci * taps];
    for (t, sums) in results.into_iter().enumerate() {
        let (start, width) = blocks[t / ci];
        let i = t % ci;
        for c in 0..width {
            let dst = ((start + c) * ci + i) * taps;
            gw[dst..dst + taps].copy_from_slice(&sums[c * taps..(c + 1) * taps]);
        }
    }
    gw
}

fn grad_taps_any<T: Scalar>(
    a: &GradGeom,
    x: &[T],
    g: &[T],
    width: usize,
    kw: usize,
    dz: usize,
    dy: usize,
    part: &mut [T],
) {
    let [_, hp, wp] = a.pdims;
    let [od_n, oh_n, ow_n] = a.out;
    for c in 0..width {
        for dx in 0..kw {
            let mut s = T::ZERO;
            for od in 0..od_n {
                for oh in 0..oh_n {
                    let xrow = a.channel_base + ((od + dz) * hp + oh + dy) * wp + dx;
                    let grow = c * a.vol + (od * oh_n + oh) * ow_n;
                    for ow in 0..ow_n {
                        s = g[grow + ow].mul_add(x[xrow + ow], s);
                    }
                }
            }
            part[c * kw + dx] = s;
        }
    }
}

/// Input coordinate for output `o` and tap `k`, if inside the unpadded input.
#[inline(always)]
fn src_index(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let p = o * stride + k;
    if p < pad || p - pad >= extent {
        None
    } else {
        Some(p - pad)
    }
}

fn forward_general<T: Scalar>(
    x: &[T],
    dims: [usize; 5],
    w: &[T],
    b: &[T],
    spec: &ConvSpec,
    out: [usize; 3],
) -> Tensor<T> {
    let [n, ci, d, h, wd] = dims;
    let co = spec.out_channels;
    let [kd, kh, kw] = spec.kernel;
    let vol = out[0] * out[1] * out[2];
    let mut y = vec![T::ZERO; n * co * vol];
    for ni in 0..n {
        for o in 0..co {
            let ybase = (ni * co + o) * vol;
            y[ybase..ybase + vol].iter_mut().for_each(|v| *v = b[o]);
            for i in 0..ci {
                let xbase = (ni * ci + i) * d * h * wd;
                for dz in 0..kd {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let wv = w[((((o * ci) + i) * kd + dz) * kh + dy) * kw + dx];
                            for od in 0..out[0] {
                                let Some(id) = src_index(od, dz, spec.stride[0], spec.padding[0], d) else { continue };
                                for oh in 0..out[1] {
                                    let Some(ih) = src_index(oh, dy, spec.stride[1], spec.padding[1], h) else { continue };
                                    let yrow = ybase + (od * out[1] + oh) * out[2];
                                    let xrow = xbase + (id * h + ih) * wd;
                                    for ow in 0..out[2] {
                                        if let Some(iw) = src_index(ow, dx, spec.stride[2], spec.padding[2], wd) {
                                            y[yrow + ow] = wv.mul_add(x[xrow + iw], y[yrow + ow]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, out[0], out[1], out[2]], y).expect("conv output shape")
}

fn backward_input_general<T: Scalar>(
    w: &[T],
    gy: &[T],
    n: usize,
    spec: &ConvSpec,
    ext: [usize; 3],
    out: [usize; 3],
) -> Tensor<T> {
    let ci = spec.in_channels;
    let co = spec.out_channels;
    let [kd, kh, kw] = spec.kernel;
    let [d, h, wd] = ext;
    let vol = out[0] * out[1] * out[2];
    let mut gx = vec![T::ZERO; n * ci * d * h * wd];
    for ni in 0..n {
        for o in 0..co {
            let gbase = (ni * co + o) * vol;
            for i in 0..ci {
                let xbase = (ni * ci + i) * d * h * wd;
                for dz in 0..kd {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let wv = w[((((o * ci) + i) * kd + dz) * kh + dy) * kw + dx];
                            for od in 0..out[0] {
                                let Some(id) = src_index(od, dz, spec.stride[0], spec.padding[0], d) else { continue };
                                for oh in 0..out[1] {
                                    let Some(ih) = src_index(oh, dy, spec.stride[1], spec.padding[1], h) else { continue };
                                    let grow = gbase + (od * out[1] + oh) * out[2];
                                    let xrow = xbase + (id * h + ih) * wd;
                                    for ow in 0..out[2] {
                                        if let Some(iw) = src_index(ow, dx, spec.stride[2], spec.padding[2], wd) {
                                            gx[xrow + iw] = wv.mul_add(gy[grow + ow], gx[xrow + iw]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, ci, d, h, wd], gx).expect("conv input-gradient shape")
}

fn weight_grad_general<T: Scalar>(
    x: &[T],
    dims: [usize; 5],
    gy: &[T],
    spec: &ConvSpec,
    out: [usize; 3],
) -> Vec<T> {
    let [n, ci, d, h, wd] = dims;
    let co = spec.out_channels;
    let [kd, kh, kw] = spec.kernel;
    let vol = out[0] * out[1] * out[2];
    let mut gw = vec![T::ZERO; co * ci * kd * kh * kw];
    for o in 0..co {
        for i in 0..ci {
            for dz in 0..kd {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let mut s = T::ZERO;
                        for ni in 0..n {
                            let gbase = (ni * co + o) * vol;
                            let xbase = (ni * ci + i) * d * h * wd;
                            for od in 0..out[0] {
                                let Some(id) = src_index(od, dz, spec.stride[0], spec.padding[0], d) else { continue };
                                for oh in 0..out[1] {
                                    let Some(ih) = src_index(oh, dy, spec.stride[1], spec.padding[1], h) else { continue };
                                    for ow in 0..out[2] {
                                        if let Some(iw) = src_index(ow, dx, spec.stride[2], spec.padding[2], wd) {
                                            s = gy[gbase + (od * out[1] + oh) * out[2] + ow]
                                                .mul_add(x[xbase + (id * h + ih) * wd + iw], s);
                                        }
                                    }
                                }
                            }
                        }
                        gw[((((o * ci) + i) * kd + dz) * kh + dy) * kw + dx] = s;
                    }
                }
            }
        }
    }
    gw
}
