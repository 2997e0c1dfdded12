use stemnet_core::ops::{softmax_channels, BnMode};
use stemnet_core::unet::{parameter_count, HeadInit, UNetConfig, UNetParams};
use stemnet_core::Tensor;

/// Layer-by-layer list of (in, out, kernel edge, has_bn) written out from
/// the architecture description, independent of the crate's own tables.
fn layer_list(levels: usize, base: usize, input: usize, classes: usize) -> Vec<(usize, usize, usize, bool)> {
    let width = |l: usize| base * 2usize.pow(l as u32);
    let mut layers = Vec::new();
    let mut prev = input;
    for l in 0..levels - 1 {
        layers.push((prev, width(l), 3, false));
        layers.push((width(l), width(l), 3, true));
        prev = width(l);
    }
    layers.push((prev, width(levels - 1), 3, false));
    layers.push((width(levels - 1), width(levels - 1), 3, false));
    for l in (0..levels - 1).rev() {
        layers.push((width(l + 1), width(l), 2, false));
        layers.push((2 * width(l), width(l), 3, false));
        layers.push((width(l), width(l), 3, false));
    }
    layers.push((width(0), classes, 1, false));
    layers
}

fn enumerate(levels: usize, base: usize, input: usize, classes: usize) -> usize {
    layer_list(levels, base, input, classes)
        .into_iter()
        .map(|(i, o, k, bn)| o * i * k * k * k + o + if bn { 2 * o } else { 0 })
        .sum()
}

#[test]
fn degenerate_hand_count() {
    let c = UNetConfig { levels: 1, base_channels: 1, in_channels: 1, num_classes: 2, input_extent: 4, ..Default::default() };
    assert_eq!(parameter_count(&c), 60);
    assert_eq!(enumerate(1, 1, 1, 2), 60);
}

#[test]
fn closed_form_matches_enumeration() {
    for levels in 1..=6 {
        for base in [1, 2, 4, 8, 16] {
            let c = UNetConfig { levels, base_channels: base, input_extent: 64, ..Default::default() };
            assert_eq!(parameter_count(&c), enumerate(levels, base, 1, 5), "levels {levels} base {base}");
        }
    }
    let d = UNetConfig::default();
    assert_eq!(parameter_count(&d), enumerate(5, 8, 1, 5));
    assert_eq!(UNetParams::<f32>::zeros(&d).unwrap().parameter_count(), parameter_count(&d));
}

#[test]
fn count_grows_with_width() {
    let mut last = 0;
    for base in 1..12 {
        let n = parameter_count(&UNetConfig { base_channels: base, ..Default::default() });
        assert!(n > last);
        last = n;
    }
}

#[test]
fn he_statistics() {
    let c = UNetConfig { head_init: HeadInit::He, ..Default::default() };
    let p = UNetParams::<f64>::init(&c, 42).unwrap();
    let mut checked = 0;
    for t in p.named_tensors() {
        if !t.name.ends_with(".w") || t.tensor.len() < 10_000 {
            continue;
        }
        let s = t.tensor.shape();
        // conv [out, in, k, k, k]; transposed conv [in, out, 2, 2, 2] sees one tap per input channel
        let fan_in = if t.name.contains(".up.") { s[0] } else { s[1] * s[2] * s[3] * s[4] };
        let n = t.tensor.len() as f64;
        let mean = t.tensor.data().iter().sum::<f64>() / n;
        let var = t.tensor.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let want = (2.0 / fan_in as f64).sqrt();
        assert!((var.sqrt() / want - 1.0).abs() < 0.1, "{}: std {} vs {want}", t.name, var.sqrt());
        checked += 1;
    }
    assert!(checked >= 4);
}

#[test]
fn biases_and_batchnorm_start_neutral() {
    let p = UNetParams::<f32>::init(&UNetConfig::default(), 1).unwrap();
    for t in p.named_tensors() {
        let want = if t.name.ends_with(".b") || t.name.ends_with("beta") || t.name.ends_with("running_mean") {
            Some(0.0)
        } else if t.name.ends_with("gamma") || t.name.ends_with("running_var") {
            Some(1.0)
        } else {
            None
        };
        if let Some(v) = want {
            assert!(t.tensor.data().iter().all(|&x| x == v), "{}", t.name);
        }
    }
}

#[test]
fn seeds_select_weights() {
    let c = UNetConfig { base_channels: 2, input_extent: 16, ..Default::default() };
    let a = UNetParams::<f32>::init(&c, 7).unwrap();
    assert_eq!(a, UNetParams::<f32>::init(&c, 7).unwrap());
    assert_ne!(a, UNetParams::<f32>::init(&c, 8).unwrap());
}

#[test]
fn forward_shape_softmax_and_purity() {
    let c = UNetConfig { levels: 3, base_channels: 2, input_extent: 16, head_init: HeadInit::He, ..Default::default() };
    let p = UNetParams::<f32>::init(&c, 3).unwrap();
    let x = Tensor::from_fn(&[1, 1, 16, 16, 16], |i| ((i * 37) % 101) as f32 / 101.0);
    let y = p.forward(&x, BnMode::Infer).unwrap();
    assert_eq!(y.shape(), [1, 5, 16, 16, 16]);
    assert_eq!(y, p.forward(&x, BnMode::Infer).unwrap());
    let probs = softmax_channels(&y).unwrap();
    let vol = 16 * 16 * 16;
    for v in 0..vol {
        let s: f32 = (0..5).map(|k| probs.data()[k * vol + v]).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn wrong_input_extent_is_rejected() {
    let c = UNetConfig { levels: 3, base_channels: 2, input_extent: 16, ..Default::default() };
    let p = UNetParams::<f32>::init(&c, 3).unwrap();
    assert!(p.forward(&Tensor::zeros(&[1, 1, 8, 8, 8]), BnMode::Infer).is_err());
    assert!(UNetConfig { input_extent: 18, ..c }.validate().is_err());
}
