use proptest::prelude::*;
use stemnet_core::metrics::{dsc, per_class_dsc};
use stemnet_core::ops::{conv3d_forward, maxpool3d_forward, relu_forward, softmax_channels, ConvSpec};
use stemnet_core::preprocess::{
    argmax_decode, crop_labels, embed_labels, normalize_intensity, one_hot_encode, CropWindow,
};
use stemnet_core::{LabelVolume, Tensor, Volume};

fn labels(dims: [usize; 3], codes: Vec<u8>) -> LabelVolume {
    let n = dims.iter().product();
    LabelVolume::new(dims, [1.0; 3], codes.into_iter().cycle().take(n).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-30.0f64..30.0, 12), shift in -100.0f64..100.0) {
        let x = Tensor::from_vec(&[1, 3, 1, 2, 2], v).unwrap();
        let p = softmax_channels(&x).unwrap();
        for i in 0..4 {
            let s: f64 = (0..3).map(|c| p.data()[c * 4 + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        let q = softmax_channels(&x.map(|a| a + shift)).unwrap();
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn dsc_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 1..64), seed in any::<u64>()) {
        let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        let d = dsc(&a, &b).unwrap();
        prop_assert_eq!(d, dsc(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn one_hot_argmax_round_trip(codes in prop::collection::vec(0u8..5, 1..40), d in 1usize..4) {
        let l = labels([d, 2, 3], codes);
        let back = argmax_decode(&one_hot_encode::<f32>(&l).unwrap(), l.spacing).unwrap();
        prop_assert_eq!(&back, &l);
        prop_assert_eq!(per_class_dsc(&back, &l).unwrap(), [1.0; 5]);
    }

    #[test]
    fn normalization_preserves_order(v in prop::collection::vec(0.0f32..4095.0, 2..50)) {
        let vol = Volume::new([v.len(), 1, 1], [1.0; 3], v.clone()).unwrap();
        let n = normalize_intensity(&vol).unwrap();
        let (lo, hi) = v.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        for i in 0..v.len() {
            prop_assert!((0.0..=1.0).contains(&n.data[i]));
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(n.data[i] <= n.data[j]);
                }
            }
        }
        if hi > lo {
            prop_assert_eq!(n.data.iter().cloned().fold(f32::MAX, f32::min), 0.0);
            prop_assert_eq!(n.data.iter().cloned().fold(f32::MIN, f32::max), 1.0);
        }
    }

    #[test]
    fn crop_and_embed_keep_window_content(
        codes in prop::collection::vec(0u8..5, 1..30),
        cx in 0usize..9, cy in 0usize..7, cz in 0usize..5, e in 1usize..6,
    ) {
        let l = labels([9, 7, 5], codes);
        let w = CropWindow::centered(l.dims, [cx, cy, cz], [e; 3]).unwrap();
        let back = embed_labels(&crop_labels(&l, &w).unwrap(), &w, l.spacing).unwrap();
        for z in 0..5 {
            for y in 0..7 {
                for x in 0..9 {
                    let i = (z * 7 + y) * 9 + x;
                    let inside = [x, y, z].iter().zip(w.origin).zip(w.extent)
                        .all(|((&g, o), ext)| (g as isize) >= o && (g as isize) < o + ext as isize);
                    prop_assert_eq!(back.labels[i], if inside { l.labels[i] } else { 0 });
                }
            }
        }
    }

    #[test]
    fn convolution_is_affine_in_its_input(
        a in prop::collection::vec(-1.0f64..1.0, 2 * 64),
        b in prop::collection::vec(-1.0f64..1.0, 2 * 64),
        w in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 27),
        k in -2.0f64..2.0,
    ) {
        let spec = ConvSpec::same3(2, 3);
        let bias = Tensor::from_vec(&[3], vec![0.5, -0.25, 1.0]).unwrap();
        let zero = Tensor::zeros(&[3]);
        let w = Tensor::from_vec(&spec.weight_shape(), w).unwrap();
        let xa = Tensor::from_vec(&[1, 2, 4, 4, 4], a).unwrap();
        let xb = Tensor::from_vec(&[1, 2, 4, 4, 4], b).unwrap();
        let mix = Tensor::from_fn(&[1, 2, 4, 4, 4], |i| k * xa.data()[i] + xb.data()[i]);
        let lhs = conv3d_forward(&mix, &w, &bias, &spec).unwrap();
        let ya = conv3d_forward(&xa, &w, &zero, &spec).unwrap();
        let yb = conv3d_forward(&xb, &w, &zero, &spec).unwrap();
        let rhs = Tensor::from_fn(lhs.shape(), |i| k * ya.data()[i] + yb.data()[i] + bias.data()[i / 64]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn pooling_and_relu_bounds(v in prop::collection::vec(-5.0f64..5.0, 64)) {
        let x = Tensor::from_vec(&[1, 1, 4, 4, 4], v).unwrap();
        let pooled = maxpool3d_forward(&x, 2).unwrap().y;
        prop_assert_eq!(pooled.shape(), &[1, 1, 2, 2, 2]);
        let top = x.data().iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(pooled.data().iter().any(|&p| p == top));
        let r = relu_forward(&x);
        prop_assert!(r.data().iter().zip(x.data()).all(|(&y, &x)| y == x.max(0.0)));
    }
}
