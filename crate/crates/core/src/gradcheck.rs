//! Finite-difference verification of the analytic gradients.
//!
//! Every check runs in `f64`. For an op `y = f(inputs)` a random cotangent
//! `r` turns the output into the scalar `⟨r, y⟩`; its analytic gradient is
//! the op's backward pass fed with `r`, and its numeric gradient is
//! `⟨r, f(x + h·e_i) − f(x − h·e_i)⟩ / 2h`, with the difference taken
//! element by element before the reduction so that large outputs do not
//! swamp the perturbation in cancellation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{soft_dice_loss, soft_dice_loss_logits, weighted_cross_entropy, ClassWeights};
use crate::ops::{
    batchnorm3d_backward, batchnorm3d_forward, conv3d_backward, conv3d_forward, maxpool3d_backward,
    maxpool3d_forward, relu_backward, relu_forward, transposed_conv3d_backward, transposed_conv3d_forward, BnMode,
    BnSettings, ConvSpec,
};
use crate::rng;
use crate::tensor::Tensor;
use crate::unet::{HeadInit, UNetConfig, UNetParams};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub params: Vec<ParamError>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        // NaN never passes
        self.max_rel_error() <= tolerance && self.params.iter().all(|p| p.checked > 0)
    }
}

type OpFn<'a> = dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'a;

/// Compares `analytic[k]` with central differences of `⟨r, f(inputs)⟩` for
/// every entry of every input named in `names`.
pub fn check_op(
    op: &str,
    names: &[&str],
    inputs: &[Tensor<f64>],
    r: &Tensor<f64>,
    analytic: &[Tensor<f64>],
    h: f64,
    f: &OpFn<'_>,
) -> Result<GradReport> {
    let mut params = Vec::with_capacity(names.len());
    let mut work = inputs.to_vec();
    for (k, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let plus = f(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let minus = f(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = directional(r, &plus, &minus) / (2.0 * h);
            worst = worst.max(nan_max(relative_error(analytic[k].data()[i], numeric)));
        }
        params.push(ParamError { name: String::from(*name), max_rel_error: worst, checked: inputs[k].len() });
    }
    Ok(GradReport { op: String::from(op), params })
}

fn directional(r: &Tensor<f64>, plus: &Tensor<f64>, minus: &Tensor<f64>) -> f64 {
    r.data().iter().zip(plus.data().iter().zip(minus.data())).map(|(&w, (&a, &b))| w * (a - b)).sum()
}

fn nan_max(e: f64) -> f64 {
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

/// The layers covered by [`layer_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    Conv3d,
    TransposedConv3d,
    MaxPool3d,
    BatchNorm3d,
    Relu,
    SoftmaxCrossEntropy,
    Dice,
}

impl LayerOp {
    pub const ALL: [LayerOp; 7] = [
        LayerOp::Conv3d,
        LayerOp::TransposedConv3d,
        LayerOp::MaxPool3d,
        LayerOp::BatchNorm3d,
        LayerOp::Relu,
        LayerOp::SoftmaxCrossEntropy,
        LayerOp::Dice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerOp::Conv3d => "conv3d",
            LayerOp::TransposedConv3d => "transposed_conv3d",
            LayerOp::MaxPool3d => "maxpool3d",
            LayerOp::BatchNorm3d => "batchnorm3d",
            LayerOp::Relu => "relu",
            LayerOp::SoftmaxCrossEntropy => "softmax_cross_entropy",
            LayerOp::Dice => "dice",
        }
    }
}

/// Deliberate corruption of one op's analytic gradient, used to show the
/// harness catches a broken backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    SignFlip(LayerOp),
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Random one-hot target in which every class occurs. An absent class
/// contributes gradients of order ε and turns the relative error into a
/// measurement of rounding noise.
fn one_hot(r: &mut ChaCha8Rng, classes: usize, vol: usize) -> Tensor<f64> {
    let mut codes: Vec<usize> = (0..vol).map(|v| if v < classes { v } else { r.random_range(0..classes) }).collect();
    codes.shuffle(r);
    let mut t = Tensor::zeros(&[1, classes, 1, 1, vol]);
    for (v, &c) in codes.iter().enumerate() {
        t.data_mut()[c * vol + v] = 1.0;
    }
    t
}

/// Draws loss-check instances until no gradient entry is smaller than
/// 1e-3 of the largest one. A loss is a single f64 whose rounding is about
/// 1e-16, so its central difference carries an absolute error near 1e-11;
/// on an entry that cancels to ~1e-6 the relative error would measure that
/// rounding rather than the gradient.
fn redraw<A>(
    r: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<(A, Tensor<f64>)>,
) -> Result<(A, Tensor<f64>)> {
    let mut last = draw(r)?;
    for _ in 0..1000 {
        let g = last.1.data();
        let big = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if g.iter().all(|v| v.abs() >= 1e-3 * big) {
            break;
        }
        last = draw(r)?;
    }
    Ok(last)
}

/// Checks one op on inputs drawn from `seed`.
pub fn check_layer(op: LayerOp, seed: u64, fault: Option<Fault>) -> Result<GradReport> {
    let mut r = rng::stream(seed, "gradcheck", &[op as u64]);
    let flip = fault == Some(Fault::SignFlip(op));
    let check = |names: &[&str], inputs: &[Tensor<f64>], r: &Tensor<f64>, analytic: &[Tensor<f64>], f: &OpFn<'_>| {
        let analytic: Vec<Tensor<f64>> =
            analytic.iter().map(|a| if flip { a.map(|v| -v) } else { a.clone() }).collect();
        check_op(op.name(), names, inputs, r, &analytic, STEP, f)
    };
    let report = match op {
        LayerOp::Conv3d => {
            let spec = ConvSpec::same3(2, 3);
            let x = uniform(&mut r, &[1, 2, 4, 3, 5], -1.0, 1.0);
            let w = uniform(&mut r, &spec.weight_shape(), -1.0, 1.0);
            let b = uniform(&mut r, &[3], -1.0, 1.0);
            let ry = uniform(&mut r, &[1, 3, 4, 3, 5], -1.0, 1.0);
            let g = conv3d_backward(&x, &w, &ry, &spec)?;
            let f = |t: &[Tensor<f64>]| conv3d_forward(&t[0], &t[1], &t[2], &spec);
            check(&["x", "w", "b"], &[x, w, b], &ry, &[g.grad_x, g.grad_w, g.grad_b], &f)?
        }
        LayerOp::TransposedConv3d => {
            let spec = ConvSpec::up2(3, 2);
            let x = uniform(&mut r, &[1, 3, 2, 3, 2], -1.0, 1.0);
            let w = uniform(&mut r, &spec.transposed_weight_shape(), -1.0, 1.0);
            let b = uniform(&mut r, &[2], -1.0, 1.0);
            let ry = uniform(&mut r, &[1, 2, 4, 6, 4], -1.0, 1.0);
            let g = transposed_conv3d_backward(&x, &w, &ry, &spec)?;
            let f = |t: &[Tensor<f64>]| transposed_conv3d_forward(&t[0], &t[1], &t[2], &spec);
            check(&["x", "w", "b"], &[x, w, b], &ry, &[g.grad_x, g.grad_w, g.grad_b], &f)?
        }
        LayerOp::MaxPool3d => {
            // distinct values spaced far beyond the step keep the argmax fixed
            let mut vals: Vec<f64> = (0..128).map(|i| i as f64 * 0.01).collect();
            vals.shuffle(&mut r);
            let x = Tensor::from_vec(&[1, 2, 4, 4, 4], vals)?;
            let ry = uniform(&mut r, &[1, 2, 2, 2, 2], -1.0, 1.0);
            let out = maxpool3d_forward(&x, 2)?;
            let gx = maxpool3d_backward(x.shape(), &out.argmax, &ry)?;
            let f = |t: &[Tensor<f64>]| Ok(maxpool3d_forward(&t[0], 2)?.y);
            check(&["x"], &[x], &ry, &[gx], &f)?
        }
        LayerOp::BatchNorm3d => {
            let x = uniform(&mut r, &[2, 3, 2, 3, 2], -2.0, 2.0);
            let gamma = uniform(&mut r, &[3], 0.5, 1.5);
            let beta = uniform(&mut r, &[3], -0.5, 0.5);
            let (rm, rv) = (Tensor::zeros(&[3]), Tensor::full(&[3], 1.0));
            let ry = uniform(&mut r, x.shape(), -1.0, 1.0);
            let s = BnSettings::default();
            let out = batchnorm3d_forward(&x, &gamma, &beta, &rm, &rv, BnMode::Train, s)?;
            let g = batchnorm3d_backward(&out.cache, &gamma, &ry)?;
            let f = |t: &[Tensor<f64>]| Ok(batchnorm3d_forward(&t[0], &t[1], &t[2], &rm, &rv, BnMode::Train, s)?.y);
            check(&["x", "gamma", "beta"], &[x, gamma, beta], &ry, &[g.grad_x, g.grad_gamma, g.grad_beta], &f)?
        }
        LayerOp::Relu => {
            // keep every input at least 1e-3 away from the kink
            let x = Tensor::from_fn(&[1, 2, 3, 3, 3], |_| {
                let m: f64 = r.random_range(1e-3..2.0);
                if r.random::<bool>() {
                    m
                } else {
                    -m
                }
            });
            let ry = uniform(&mut r, x.shape(), -1.0, 1.0);
            let gx = relu_backward(&x, &ry)?;
            let f = |t: &[Tensor<f64>]| Ok(relu_forward(&t[0]));
            check(&["x"], &[x], &ry, &[gx], &f)?
        }
        LayerOp::SoftmaxCrossEntropy => {
            let vol = 12;
            let one = Tensor::full(&[1], 1.0);
            let (z, g, w, grad) = redraw(&mut r, |r| {
                let z = uniform(r, &[1, 5, 1, 1, vol], -3.0, 3.0);
                let g = one_hot(r, 5, vol);
                let w = ClassWeights((0..5).map(|_| r.random_range(1.0..20.0)).collect());
                let grad = weighted_cross_entropy(&z, &g, &w)?.grad;
                Ok(((z, g, w), grad))
            })
            .map(|((z, g, w), grad)| (z, g, w, grad))?;
            let f = |t: &[Tensor<f64>]| Tensor::from_vec(&[1], vec![weighted_cross_entropy(&t[0], &g, &w)?.loss]);
            check(&["logits"], &[z], &one, &[grad], &f)?
        }
        LayerOp::Dice => {
            let vol = 12;
            let one = Tensor::full(&[1], 1.0);
            let eps = 1e-5;
            let ((p, g), gp) = redraw(&mut r, |r| {
                let g = one_hot(r, 5, vol);
                let p = uniform(r, &[1, 5, 1, 1, vol], 0.05, 0.95);
                let grad = soft_dice_loss(&p, &g, eps)?.grad;
                Ok(((p, g), grad))
            })?;
            let fp = |t: &[Tensor<f64>]| Tensor::from_vec(&[1], vec![soft_dice_loss(&t[0], &g, eps)?.loss]);
            let mut rep = check(&["probabilities"], &[p], &one, &[gp], &fp)?;
            let ((z, g), gz) = redraw(&mut r, |r| {
                let g = one_hot(r, 5, vol);
                let z = uniform(r, &[1, 5, 1, 1, vol], -3.0, 3.0);
                let grad = soft_dice_loss_logits(&z, &g, eps)?.grad;
                Ok(((z, g), grad))
            })?;
            let fz = |t: &[Tensor<f64>]| Tensor::from_vec(&[1], vec![soft_dice_loss_logits(&t[0], &g, eps)?.loss]);
            rep.params.extend(check(&["logits"], &[z], &one, &[gz], &fz)?.params);
            rep
        }
    };
    Ok(report)
}

/// Runs every layer check over `seeds` seeds derived from `seed`.
pub fn layer_suite(seed: u64, seeds: usize, fault: Option<Fault>) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for op in LayerOp::ALL {
        let mut merged: Option<GradReport> = None;
        for s in 0..seeds {
            let rep = check_layer(op, rng::derive_seed(seed, &[s as u64]), fault)?;
            merged = Some(match merged {
                None => rep,
                Some(mut m) => {
                    for (a, b) in m.params.iter_mut().zip(rep.params) {
                        a.max_rel_error = a.max_rel_error.max(b.max_rel_error);
                        a.checked += b.checked;
                    }
                    m
                }
            });
        }
        if let Some(m) = merged {
            out.push(m);
        }
    }
    Ok(out)
}

/// End-to-end check of weighted cross-entropy through the whole network in
/// train mode, on `samples` randomly chosen entries of every learnable
/// tensor.
///
/// Perturbed evaluations keep the ReLU masks and pooling choices of the
/// unperturbed pass, so a step that straddles a kink does not register as
/// a gradient error; away from kinks this is the network itself. The head
/// is always drawn at random, since a zero head zeroes every other gradient.
pub fn check_network(config: &UNetConfig, seed: u64, samples: usize, h: f64) -> Result<GradReport> {
    let config = &UNetConfig { head_init: HeadInit::He, ..*config };
    let params = UNetParams::<f64>::init(config, seed)?;
    let mut r = rng::stream(seed, "gradcheck-net", &[]);
    let s = config.input_extent;
    let vol = s * s * s;
    let x = Tensor::from_fn(&[1, config.in_channels, s, s, s], |_| r.random_range(0.0..1.0));
    let mut target = Tensor::zeros(&[1, config.num_classes, s, s, s]);
    for v in 0..vol {
        // slabs give every class a coherent region
        let (z, y, xx) = ((v / (s * s)) as f64, ((v / s) % s) as f64, (v % s) as f64);
        let k = libm::floor(config.num_classes as f64 * (z + 2.0 * y + 3.0 * xx) / (6.0 * s as f64)) as usize;
        target.data_mut()[k.min(config.num_classes - 1) * vol + v] = 1.0;
    }
    let weights = ClassWeights((0..config.num_classes).map(|c| 1.0 + c as f64).collect());

    let (logits, gates) = params.forward_train(&x)?;
    let loss = weighted_cross_entropy(&logits, &target, &weights)?;
    let grads = params.backward(&gates, &loss.grad)?;
    let eval = |p: &UNetParams<f64>| -> Result<f64> {
        Ok(weighted_cross_entropy(&p.forward_train_gated(&x, &gates)?, &target, &weights)?.loss)
    };

    let names: Vec<(String, bool)> = params.named_tensors().into_iter().map(|t| (t.name, t.learnable)).collect();
    let analytic: Vec<Tensor<f64>> = grads.named_tensors().into_iter().map(|t| t.tensor.clone()).collect();
    let mut work = params.clone();
    let mut report = GradReport {
        op: format!("unet(levels={}, base={}, S={s})", config.levels, config.base_channels),
        params: Vec::new(),
    };
    for (k, (name, learnable)) in names.into_iter().enumerate() {
        if !learnable {
            continue;
        }
        let n = analytic[k].len();
        let mut picks: Vec<usize> = (0..n).collect();
        picks.shuffle(&mut r);
        picks.truncate(samples);
        let mut worst = 0.0f64;
        for &i in &picks {
            let x0 = work.tensors_mut()[k].data()[i];
            work.tensors_mut()[k].data_mut()[i] = x0 + h;
            let lp = eval(&work)?;
            work.tensors_mut()[k].data_mut()[i] = x0 - h;
            let lm = eval(&work)?;
            work.tensors_mut()[k].data_mut()[i] = x0;
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(nan_max(relative_error(analytic[k].data()[i], numeric)));
        }
        report.params.push(ParamError { name, max_rel_error: worst, checked: picks.len() });
    }
    Ok(report)
}
