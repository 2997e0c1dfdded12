use stemnet_core::gradcheck::{check_layer, check_network, check_op, layer_suite, Fault, LayerOp, STEP};
use stemnet_core::unet::UNetConfig;
use stemnet_core::Tensor;

const TOL: f64 = 1e-6;

#[test]
fn every_layer_passes_on_five_seeds() {
    let reports = layer_suite(11, 5, None).unwrap();
    assert_eq!(reports.len(), LayerOp::ALL.len());
    for r in &reports {
        assert!(r.passed(TOL), "{}: {:e}", r.op, r.max_rel_error());
        assert!(r.params.iter().all(|p| p.checked >= 5), "{} checked too few entries", r.op);
    }
}

#[test]
fn sign_flip_is_caught_and_named() {
    for op in [LayerOp::Conv3d, LayerOp::BatchNorm3d, LayerOp::Dice] {
        let bad = check_layer(op, 3, Some(Fault::SignFlip(op))).unwrap();
        assert!(!bad.passed(TOL));
        assert_eq!(bad.op, op.name());
        // a fault in one op leaves the others untouched
        let other = if op == LayerOp::Relu { LayerOp::MaxPool3d } else { LayerOp::Relu };
        assert!(check_layer(other, 3, Some(Fault::SignFlip(op))).unwrap().passed(TOL));
    }
}

#[test]
fn harness_separates_right_from_wrong_derivatives() {
    let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
    let r = Tensor::from_vec(&[4], vec![1.0, -0.5, 0.25, 2.0]).unwrap();
    let cube = |t: &[Tensor<f64>]| Ok(t[0].map(|v| v * v * v));
    let grad = |k: f64| Tensor::from_fn(&[4], |i| k * x.data()[i] * x.data()[i] * r.data()[i]);
    let good = check_op("cube", &["x"], &[x.clone()], &r, &[grad(3.0)], STEP, &cube).unwrap();
    let bad = check_op("cube", &["x"], &[x.clone()], &r, &[grad(2.0)], STEP, &cube).unwrap();
    assert!(good.passed(TOL), "{:e}", good.max_rel_error());
    assert!(!bad.passed(TOL));
}

#[test]
fn whole_network_composite() {
    let config = UNetConfig { levels: 3, base_channels: 2, input_extent: 32, ..Default::default() };
    let r = check_network(&config, 5, 6, STEP).unwrap();
    assert!(r.passed(1e-5), "{:e}", r.max_rel_error());
}

#[test]
fn two_class_toy_network() {
    let config = UNetConfig { levels: 2, base_channels: 2, num_classes: 2, input_extent: 8, ..Default::default() };
    let r = check_network(&config, 9, 8, STEP).unwrap();
    assert!(r.passed(1e-5), "{:e}", r.max_rel_error());
}
