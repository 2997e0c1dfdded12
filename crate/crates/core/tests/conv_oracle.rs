//! Convolution kernels against direct nested-loop evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stemnet_core::ops::{conv3d_forward, transposed_conv3d_forward, ConvSpec};
use stemnet_core::Tensor;

fn brute_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: &ConvSpec) -> Tensor<f64> {
    let [n, ci, d, h, wd] = x.dims5("oracle").unwrap();
    let out = s.conv_output([d, h, wd]).unwrap();
    let co = s.out_channels;
    let mut y = Tensor::zeros(&[n, co, out[0], out[1], out[2]]);
    let xi = |b: usize, c: usize, z: isize, yy: isize, xx: isize| -> f64 {
        if z < 0 || yy < 0 || xx < 0 || z >= d as isize || yy >= h as isize || xx >= wd as isize {
            return 0.0;
        }
        x.data()[(((b * ci + c) * d + z as usize) * h + yy as usize) * wd + xx as usize]
    };
    let k = s.kernel;
    let mut idx = 0;
    for bn in 0..n {
        for o in 0..co {
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for kz in 0..k[0] {
                                for ky in 0..k[1] {
                                    for kx in 0..k[2] {
                                        let z = (oz * s.stride[0] + kz) as isize - s.padding[0] as isize;
                                        let yy = (oy * s.stride[1] + ky) as isize - s.padding[1] as isize;
                                        let xx = (ox * s.stride[2] + kx) as isize - s.padding[2] as isize;
                                        let wv = w.data()[(((o * ci + c) * k[0] + kz) * k[1] + ky) * k[2] + kx];
                                        acc += wv * xi(bn, c, z, yy, xx);
                                    }
                                }
                            }
                        }
                        y.data_mut()[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    y
}

/// Scatter form: every input voxel adds `x·w` to the outputs it reaches.
fn brute_transposed(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: &ConvSpec) -> Tensor<f64> {
    let [n, ci, d, h, wd] = x.dims5("oracle").unwrap();
    let out = s.transposed_output([d, h, wd]).unwrap();
    let co = s.out_channels;
    let k = s.kernel;
    let mut y = Tensor::zeros(&[n, co, out[0], out[1], out[2]]);
    let vol = out[0] * out[1] * out[2];
    for bn in 0..n {
        for o in 0..co {
            for v in 0..vol {
                y.data_mut()[(bn * co + o) * vol + v] = b.data()[o];
            }
        }
        for c in 0..ci {
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..wd {
                        let xv = x.data()[(((bn * ci + c) * d + z) * h + yy) * wd + xx];
                        for o in 0..co {
                            for kz in 0..k[0] {
                                for ky in 0..k[1] {
                                    for kx in 0..k[2] {
                                        let oz = (z * s.stride[0] + kz) as isize - s.padding[0] as isize;
                                        let oy = (yy * s.stride[1] + ky) as isize - s.padding[1] as isize;
                                        let ox = (xx * s.stride[2] + kx) as isize - s.padding[2] as isize;
                                        if oz < 0 || oy < 0 || ox < 0 {
                                            continue;
                                        }
                                        let (oz, oy, ox) = (oz as usize, oy as usize, ox as usize);
                                        if oz >= out[0] || oy >= out[1] || ox >= out[2] {
                                            continue;
                                        }
                                        let wv = w.data()[(((c * co + o) * k[0] + kz) * k[1] + ky) * k[2] + kx];
                                        y.data_mut()[(((bn * co + o) * out[0] + oz) * out[1] + oy) * out[2] + ox] += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// A random geometry whose output extents are whole numbers.
fn random_conv_case(r: &mut ChaCha8Rng) -> (ConvSpec, [usize; 5]) {
    loop {
        let mut kernel = [0; 3];
        let mut stride = [0; 3];
        let mut padding = [0; 3];
        let mut dims = [0; 3];
        for a in 0..3 {
            kernel[a] = r.random_range(1..=3);
            stride[a] = r.random_range(1..=2);
            padding[a] = r.random_range(0..kernel[a]);
            dims[a] = r.random_range(1..=6);
        }
        let spec = ConvSpec::new(kernel, stride, padding, r.random_range(1..=3), r.random_range(1..=3)).unwrap();
        if spec.conv_output(dims).is_ok() {
            let n = r.random_range(1..=2);
            return (spec, [n, spec.in_channels, dims[0], dims[1], dims[2]]);
        }
    }
}

#[test]
fn conv3d_matches_nested_loops_on_100_instances() {
    let mut r = ChaCha8Rng::seed_from_u64(0xC0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (spec, xs) = random_conv_case(&mut r);
        let x = random(&mut r, &xs);
        let w = random(&mut r, &spec.weight_shape());
        let b = random(&mut r, &[spec.out_channels]);
        let fast = conv3d_forward(&x, &w, &b, &spec).unwrap();
        let slow = brute_conv(&x, &w, &b, &spec);
        assert_eq!(fast.shape(), slow.shape());
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    assert!(worst <= 1e-6, "max abs difference {worst:e}");
}

#[test]
fn conv3d_in_f32_tracks_the_f64_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(0xC1);
    for _ in 0..20 {
        let (spec, xs) = random_conv_case(&mut r);
        let x = random(&mut r, &xs);
        let w = random(&mut r, &spec.weight_shape());
        let b = random(&mut r, &[spec.out_channels]);
        let fast = conv3d_forward(&x.cast::<f32>(), &w.cast::<f32>(), &b.cast::<f32>(), &spec).unwrap();
        let slow = brute_conv(&x, &w, &b, &spec);
        assert!(fast.cast::<f64>().max_abs_diff(&slow) <= 1e-4);
    }
}

#[test]
fn network_shaped_convolutions_match() {
    // the kernel takes a blocked path for wide channel counts
    let mut r = ChaCha8Rng::seed_from_u64(0xC2);
    for (ci, co, e) in [(8, 16, 6), (16, 8, 4), (1, 8, 8)] {
        let spec = ConvSpec::same3(ci, co);
        let x = random(&mut r, &[1, ci, e, e, e]);
        let w = random(&mut r, &spec.weight_shape());
        let b = random(&mut r, &[co]);
        let d = conv3d_forward(&x, &w, &b, &spec).unwrap().max_abs_diff(&brute_conv(&x, &w, &b, &spec));
        assert!(d <= 1e-9, "{ci}->{co}: {d:e}");
    }
}

#[test]
fn transposed_conv3d_matches_scatter_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(0xC3);
    for _ in 0..50 {
        let mut kernel = [0; 3];
        let mut stride = [0; 3];
        let mut dims = [0; 3];
        for a in 0..3 {
            kernel[a] = r.random_range(1..=3);
            stride[a] = r.random_range(1..=2);
            dims[a] = r.random_range(1..=4);
        }
        let spec = ConvSpec::new(kernel, stride, [0; 3], r.random_range(1..=3), r.random_range(1..=3)).unwrap();
        let x = random(&mut r, &[1, spec.in_channels, dims[0], dims[1], dims[2]]);
        let w = random(&mut r, &spec.transposed_weight_shape());
        let b = random(&mut r, &[spec.out_channels]);
        let fast = transposed_conv3d_forward(&x, &w, &b, &spec).unwrap();
        let slow = brute_transposed(&x, &w, &b, &spec);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) <= 1e-9);
    }
}
