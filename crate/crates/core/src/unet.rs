//! The encoder-decoder network.
//!
//! ```text
//! level 0   conv-relu-conv-relu-bn ─────────────skip──────────────▶ concat-conv-relu-conv-relu ─▶ head
//!              │ maxpool                                                  ▲ upconv
//! level 1      conv-relu-conv-relu-bn ───skip───▶ concat-conv-relu-conv-relu
//!                 │ maxpool                             ▲ upconv
//! bottleneck      conv-relu-conv-relu ──────────────────┘
//! ```
//!
//! Level `ℓ` has `base · 2^ℓ` channels; the bottleneck sits at level
//! `levels − 1`. A single-level network is just the bottleneck followed by
//! the head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm3d_backward, batchnorm3d_forward, concat_channels, conv3d_backward_input, conv3d_backward_params,
    conv3d_forward, maxpool3d_backward, maxpool3d_forward, relu_backward_from_output, relu_inplace, split_channels,
    transposed_conv3d_backward, transposed_conv3d_forward, BatchNormCache, BnMode, BnSettings, ConvSpec, PoolOutput,
};
use crate::preprocess::argmax_decode;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::LabelVolume;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Edge length of the cubic input.
    pub input_extent: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub batchnorm: BnSettings,
    #[cfg_attr(feature = "serde", serde(default))]
    pub head_init: HeadInit,
}

/// How [`UNetParams::init`] fills the 1×1×1 output layer's weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum HeadInit {
    /// Start from all-zero logits. Large random initial logits make
    /// weighted cross-entropy drive every head-input ReLU negative.
    #[default]
    Zero,
    /// Same He-normal draw as every other convolution.
    He,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 5,
            base_channels: 8,
            in_channels: 1,
            num_classes: 5,
            input_extent: 96,
            batchnorm: BnSettings::default(),
            head_init: HeadInit::Zero,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 || self.levels > 16 {
            return bad(format!("levels must be in 1..=16, got {}", self.levels));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        let div = 1usize << (self.levels - 1);
        if self.input_extent == 0 || self.input_extent % div != 0 {
            return bad(format!(
                "input extent {} is not a positive multiple of 2^(levels-1) = {div}",
                self.input_extent
            ));
        }
        if !(self.batchnorm.eps > 0.0) || !(0.0..=1.0).contains(&self.batchnorm.momentum) {
            return bad("batch-norm eps must be positive and momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Channel width of level `ℓ`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Learnable parameters in closed form; running statistics are excluded.
pub fn parameter_count(config: &UNetConfig) -> usize {
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k * k + co;
    let l = config.levels;
    let mut total = 0;
    for lvl in 0..l - 1 {
        let ci = if lvl == 0 { config.in_channels } else { config.width(lvl - 1) };
        let w = config.width(lvl);
        total += conv(ci, w, 3) + conv(w, w, 3) + 2 * w;
    }
    let ci = if l == 1 { config.in_channels } else { config.width(l - 2) };
    let wb = config.width(l - 1);
    total += conv(ci, wb, 3) + conv(wb, wb, 3);
    for lvl in 0..l - 1 {
        let w = config.width(lvl);
        total += conv(config.width(lvl + 1), w, 2) + conv(2 * w, w, 3) + conv(w, w, 3);
    }
    total + conv(config.width(0), config.num_classes, 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub spec: ConvSpec,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Conv<T> {
    fn zeros(spec: ConvSpec, transposed: bool) -> Self {
        let shape = if transposed { spec.transposed_weight_shape() } else { spec.weight_shape() };
        Conv { spec, w: Tensor::zeros(&shape), b: Tensor::zeros(&[spec.out_channels]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLevel<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLevel<T> {
    pub up: Conv<T>,
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
}

/// Every tensor of the network. The same structure doubles as a gradient
/// or momentum buffer, in which case the running statistics are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T = f32> {
    pub config: UNetConfig,
    /// Levels `0 .. levels−1`.
    pub encoders: Vec<EncoderLevel<T>>,
    pub bottleneck: [Conv<T>; 2],
    /// Indexed by level, `decoders[ℓ]` produces level-`ℓ` features.
    pub decoders: Vec<DecoderLevel<T>>,
    pub head: Conv<T>,
}

/// A tensor of the parameter table.
pub struct NamedTensor<'a, T> {
    pub name: String,
    pub tensor: &'a Tensor<T>,
    /// False for batch-norm running statistics.
    pub learnable: bool,
}

impl<T: Scalar> UNetParams<T> {
    /// All-zero tensors laid out for `config`.
    pub fn zeros(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let l = config.levels;
        let mut encoders = Vec::with_capacity(l - 1);
        for lvl in 0..l - 1 {
            let ci = if lvl == 0 { config.in_channels } else { config.width(lvl - 1) };
            let w = config.width(lvl);
            encoders.push(EncoderLevel {
                conv1: Conv::zeros(ConvSpec::same3(ci, w), false),
                conv2: Conv::zeros(ConvSpec::same3(w, w), false),
                bn: BatchNorm {
                    gamma: Tensor::full(&[w], T::ONE),
                    beta: Tensor::zeros(&[w]),
                    running_mean: Tensor::zeros(&[w]),
                    running_var: Tensor::full(&[w], T::ONE),
                },
            });
        }
        let ci = if l == 1 { config.in_channels } else { config.width(l - 2) };
        let wb = config.width(l - 1);
        let bottleneck = [Conv::zeros(ConvSpec::same3(ci, wb), false), Conv::zeros(ConvSpec::same3(wb, wb), false)];
        let decoders = (0..l - 1)
            .map(|lvl| {
                let w = config.width(lvl);
                DecoderLevel {
                    up: Conv::zeros(ConvSpec::up2(config.width(lvl + 1), w), true),
                    conv1: Conv::zeros(ConvSpec::same3(2 * w, w), false),
                    conv2: Conv::zeros(ConvSpec::same3(w, w), false),
                }
            })
            .collect();
        let head = Conv::zeros(ConvSpec::pointwise(config.width(0), config.num_classes), false);
        Ok(UNetParams { config: *config, encoders, bottleneck, decoders, head })
    }

    /// He-normal weights (`σ = √(2/fan_in)`), zero biases, unit batch-norm
    /// scale; the head follows `config.head_init`. Each tensor draws from
    /// its own stream, keyed by its position in the parameter table.
    pub fn init(config: &UNetConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut index = 0u64;
        let convs = p.for_each_conv_mut(|_, _| {});
        p.for_each_conv_mut(|conv, transposed| {
            index += 1;
            if index == convs && config.head_init == HeadInit::Zero {
                return;
            }
            let fan_in = if transposed {
                // each output voxel of a stride-s transposed conv sees k³/s³ taps per input channel
                let taps: usize = conv.spec.kernel.iter().zip(&conv.spec.stride).map(|(k, s)| k.div_ceil(*s)).product();
                conv.spec.in_channels * taps
            } else {
                conv.spec.in_channels * conv.spec.kernel_volume()
            };
            let std = libm::sqrt(2.0 / fan_in as f64);
            let mut r = rng::stream(seed, "init", &[index - 1]);
            for v in conv.w.data_mut() {
                let z: f64 = r.sample(StandardNormal);
                *v = T::from_f64(z * std);
            }
        });
        Ok(p)
    }

    /// Visits every convolution in table order; returns how many there are.
    fn for_each_conv_mut(&mut self, mut f: impl FnMut(&mut Conv<T>, bool)) -> u64 {
        let mut n = 0;
        let mut f = |c: &mut Conv<T>, t: bool| {
            n += 1;
            f(c, t)
        };
        for e in &mut self.encoders {
            f(&mut e.conv1, false);
            f(&mut e.conv2, false);
        }
        f(&mut self.bottleneck[0], false);
        f(&mut self.bottleneck[1], false);
        for d in &mut self.decoders {
            f(&mut d.up, true);
            f(&mut d.conv1, false);
            f(&mut d.conv2, false);
        }
        f(&mut self.head, false);
        n
    }

    /// The ordered tensor table.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut out = Vec::new();
        let mut push = |name: String, tensor, learnable| out.push(NamedTensor { name, tensor, learnable });
        for (l, e) in self.encoders.iter().enumerate() {
            push(format!("enc{l}.conv1.w"), &e.conv1.w, true);
            push(format!("enc{l}.conv1.b"), &e.conv1.b, true);
            push(format!("enc{l}.conv2.w"), &e.conv2.w, true);
            push(format!("enc{l}.conv2.b"), &e.conv2.b, true);
            push(format!("enc{l}.bn.gamma"), &e.bn.gamma, true);
            push(format!("enc{l}.bn.beta"), &e.bn.beta, true);
            push(format!("enc{l}.bn.running_mean"), &e.bn.running_mean, false);
            push(format!("enc{l}.bn.running_var"), &e.bn.running_var, false);
        }
        for (i, c) in self.bottleneck.iter().enumerate() {
            push(format!("bottleneck.conv{}.w", i + 1), &c.w, true);
            push(format!("bottleneck.conv{}.b", i + 1), &c.b, true);
        }
        for (l, d) in self.decoders.iter().enumerate() {
            push(format!("dec{l}.up.w"), &d.up.w, true);
            push(format!("dec{l}.up.b"), &d.up.b, true);
            push(format!("dec{l}.conv1.w"), &d.conv1.w, true);
            push(format!("dec{l}.conv1.b"), &d.conv1.b, true);
            push(format!("dec{l}.conv2.w"), &d.conv2.w, true);
            push(format!("dec{l}.conv2.b"), &d.conv2.b, true);
        }
        push("head.w".into(), &self.head.w, true);
        push("head.b".into(), &self.head.b, true);
        out
    }

    /// Mutable tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for e in &mut self.encoders {
            out.extend([
                &mut e.conv1.w,
                &mut e.conv1.b,
                &mut e.conv2.w,
                &mut e.conv2.b,
                &mut e.bn.gamma,
                &mut e.bn.beta,
                &mut e.bn.running_mean,
                &mut e.bn.running_var,
            ]);
        }
        for c in &mut self.bottleneck {
            out.extend([&mut c.w, &mut c.b]);
        }
        for d in &mut self.decoders {
            out.extend([&mut d.up.w, &mut d.up.b, &mut d.conv1.w, &mut d.conv1.b, &mut d.conv2.w, &mut d.conv2.b]);
        }
        out.extend([&mut self.head.w, &mut self.head.b]);
        out
    }

    /// Learnable tensors only, mutable, in table order.
    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let flags: Vec<bool> = self.named_tensors().iter().map(|t| t.learnable).collect();
        self.tensors_mut().into_iter().zip(flags).filter(|(_, l)| *l).map(|(t, _)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().filter(|t| t.learnable).map(|t| t.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UNetParams<U> {
        let conv = |c: &Conv<T>| Conv { spec: c.spec, w: c.w.cast(), b: c.b.cast() };
        UNetParams {
            config: self.config,
            encoders: self
                .encoders
                .iter()
                .map(|e| EncoderLevel {
                    conv1: conv(&e.conv1),
                    conv2: conv(&e.conv2),
                    bn: BatchNorm {
                        gamma: e.bn.gamma.cast(),
                        beta: e.bn.beta.cast(),
                        running_mean: e.bn.running_mean.cast(),
                        running_var: e.bn.running_var.cast(),
                    },
                })
                .collect(),
            bottleneck: [conv(&self.bottleneck[0]), conv(&self.bottleneck[1])],
            decoders: self
                .decoders
                .iter()
                .map(|d| DecoderLevel { up: conv(&d.up), conv1: conv(&d.conv1), conv2: conv(&d.conv2) })
                .collect(),
            head: conv(&self.head),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.input_extent;
        let want = [1, self.config.in_channels, s, s, s];
        if x.shape() != want {
            return Err(Error::shape("unet forward", format!("input shape {:?}, expected {want:?}", x.shape())));
        }
        Ok(())
    }

    /// Logits `[1, num_classes, S, S, S]`, with batch norm in the given mode
    /// and no cached activations.
    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.run(x.clone(), mode, None, None)
    }

    /// Train-mode forward pass keeping everything the backward pass needs.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let mut cache = ForwardCache::default();
        let logits = self.run(x.clone(), BnMode::Train, Some(&mut cache), None)?;
        Ok((logits, cache))
    }

    /// Train-mode forward with the ReLU masks and pooling choices of an
    /// earlier [`forward_train`](Self::forward_train) held fixed. Used by
    /// finite-difference checks, whose perturbations would otherwise flip
    /// gates and measure the kink instead of the gradient.
    pub fn forward_train_gated(&self, x: &Tensor<T>, gates: &ForwardCache<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.run(x.clone(), BnMode::Train, None, Some(gates))
    }

    /// Inference: forward with running statistics, then per-voxel argmax.
    pub fn predict(&self, x: &Tensor<T>, spacing: [f64; 3]) -> Result<LabelVolume> {
        argmax_decode(&self.forward(x, BnMode::Infer)?, spacing)
    }

    /// With `gates`, every ReLU reuses the mask and every pooling layer the
    /// argmax recorded in that cache instead of deciding from its input.
    /// The network then is smooth in its parameters, with the same gradient
    /// as the real one at the point where the gates were recorded.
    fn run(
        &self,
        x: Tensor<T>,
        mode: BnMode,
        mut cache: Option<&mut ForwardCache<T>>,
        gates: Option<&ForwardCache<T>>,
    ) -> Result<Tensor<T>> {
        if let Some(g) = gates {
            if g.encoders.len() != self.encoders.len() || g.decoders.len() != self.decoders.len() {
                return Err(Error::Input("gate cache does not belong to this network".into()));
            }
        }
        let bn_settings = self.config.batchnorm;
        let mut cur = x;
        let mut skips = Vec::with_capacity(self.encoders.len());
        for (lvl, enc) in self.encoders.iter().enumerate() {
            let gc = gates.map(|g| &g.encoders[lvl]);
            let mut r1 = conv3d_forward(&cur, &enc.conv1.w, &enc.conv1.b, &enc.conv1.spec)?;
            gate(&mut r1, gc.map(|g| &g.r1))?;
            let mut r2 = conv3d_forward(&r1, &enc.conv2.w, &enc.conv2.b, &enc.conv2.spec)?;
            gate(&mut r2, gc.map(|g| &g.r2))?;
            let bn = batchnorm3d_forward(
                &r2,
                &enc.bn.gamma,
                &enc.bn.beta,
                &enc.bn.running_mean,
                &enc.bn.running_var,
                mode,
                bn_settings,
            )?;
            let pool = match gc {
                None => maxpool3d_forward(&bn.y, 2)?,
                Some(g) => pool_with(&bn.y, &g.argmax)?,
            };
            skips.push(bn.y);
            let input = core::mem::replace(&mut cur, pool.y);
            if let Some(c) = cache.as_deref_mut() {
                c.encoders.push(EncoderCache {
                    input,
                    r1,
                    r2,
                    bn: bn.cache,
                    argmax: pool.argmax,
                    running_mean: bn.running_mean,
                    running_var: bn.running_var,
                });
            }
        }

        let [b1c, b2c] = &self.bottleneck;
        let mut b1 = conv3d_forward(&cur, &b1c.w, &b1c.b, &b1c.spec)?;
        gate(&mut b1, gates.map(|g| &g.bottleneck_r1))?;
        let mut b2 = conv3d_forward(&b1, &b2c.w, &b2c.b, &b2c.spec)?;
        gate(&mut b2, gates.map(|g| g.decoders.last().map_or(&g.head_input, |d| &d.up_input)))?;
        if let Some(c) = cache.as_deref_mut() {
            c.bottleneck_input = core::mem::replace(&mut cur, Tensor::zeros(&[0]));
            c.bottleneck_r1 = b1;
        }
        cur = b2;

        let mut dec_cache = Vec::with_capacity(self.decoders.len());
        for (lvl, dec) in self.decoders.iter().enumerate().rev() {
            let up = transposed_conv3d_forward(&cur, &dec.up.w, &dec.up.b, &dec.up.spec)?;
            let cat = concat_channels(&skips[lvl], &up)?;
            drop(up);
            skips.truncate(lvl);
            let mut e1 = conv3d_forward(&cat, &dec.conv1.w, &dec.conv1.b, &dec.conv1.spec)?;
            gate(&mut e1, gates.map(|g| &g.decoders[lvl].e1))?;
            let mut e2 = conv3d_forward(&e1, &dec.conv2.w, &dec.conv2.b, &dec.conv2.spec)?;
            gate(&mut e2, gates.map(|g| if lvl == 0 { &g.head_input } else { &g.decoders[lvl - 1].up_input }))?;
            let prev = core::mem::replace(&mut cur, e2);
            if cache.is_some() {
                dec_cache.push(DecoderCache { up_input: prev, cat, e1 });
            }
        }
        let logits = conv3d_forward(&cur, &self.head.w, &self.head.b, &self.head.spec)?;
        if let Some(c) = cache {
            dec_cache.reverse();
            c.decoders = dec_cache;
            c.head_input = cur;
        }
        Ok(logits)
    }

    /// Gradients of a scalar loss with respect to every learnable tensor,
    /// given `∂L/∂logits`. Running-statistic slots of the result are zero.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<UNetParams<T>> {
        if cache.encoders.len() != self.encoders.len() || cache.decoders.len() != self.decoders.len() {
            return Err(Error::Input("forward cache does not belong to this network".into()));
        }
        let mut g = UNetParams::zeros(&self.config)?;
        for e in &mut g.encoders {
            e.bn.gamma.fill(T::ZERO);
            e.bn.running_var.fill(T::ZERO);
        }

        let head_in = &cache.head_input;
        let (gw, gb) = conv3d_backward_params(head_in, grad_logits, &self.head.spec)?;
        g.head.w = gw;
        g.head.b = gb;
        let mut grad = conv3d_backward_input(&self.head.w, grad_logits, &self.head.spec, extent(head_in))?;

        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..self.decoders.len()).map(|_| None).collect();
        for (lvl, dec) in self.decoders.iter().enumerate() {
            let dc = &cache.decoders[lvl];
            let out = if lvl == 0 { &cache.head_input } else { &cache.decoders[lvl - 1].up_input };
            relu_backward_from_output(out, &mut grad)?;
            let gd = &mut g.decoders[lvl];
            (gd.conv2.w, gd.conv2.b) = conv3d_backward_params(&dc.e1, &grad, &dec.conv2.spec)?;
            grad = conv3d_backward_input(&dec.conv2.w, &grad, &dec.conv2.spec, extent(&dc.e1))?;
            relu_backward_from_output(&dc.e1, &mut grad)?;
            (gd.conv1.w, gd.conv1.b) = conv3d_backward_params(&dc.cat, &grad, &dec.conv1.spec)?;
            grad = conv3d_backward_input(&dec.conv1.w, &grad, &dec.conv1.spec, extent(&dc.cat))?;
            let (g_skip, g_up) = split_channels(&grad, self.config.width(lvl))?;
            skip_grads[lvl] = Some(g_skip);
            let up = transposed_conv3d_backward(&dc.up_input, &dec.up.w, &g_up, &dec.up.spec)?;
            (gd.up.w, gd.up.b) = (up.grad_w, up.grad_b);
            grad = up.grad_x;
        }

        let [b1c, b2c] = &self.bottleneck;
        let b2_out = match cache.decoders.last() {
            Some(d) => &d.up_input,
            None => &cache.head_input,
        };
        relu_backward_from_output(b2_out, &mut grad)?;
        (g.bottleneck[1].w, g.bottleneck[1].b) = conv3d_backward_params(&cache.bottleneck_r1, &grad, &b2c.spec)?;
        grad = conv3d_backward_input(&b2c.w, &grad, &b2c.spec, extent(&cache.bottleneck_r1))?;
        relu_backward_from_output(&cache.bottleneck_r1, &mut grad)?;
        (g.bottleneck[0].w, g.bottleneck[0].b) = conv3d_backward_params(&cache.bottleneck_input, &grad, &b1c.spec)?;
        if !self.encoders.is_empty() {
            grad = conv3d_backward_input(&b1c.w, &grad, &b1c.spec, extent(&cache.bottleneck_input))?;
        }

        for (lvl, enc) in self.encoders.iter().enumerate().rev() {
            let ec = &cache.encoders[lvl];
            let mut g_bn = maxpool3d_backward(ec.r2.shape(), &ec.argmax, &grad)?;
            let skip = skip_grads[lvl].take().ok_or_else(|| Error::Input("missing skip gradient".into()))?;
            g_bn.add_assign(&skip)?;
            let bn = batchnorm3d_backward(&ec.bn, &enc.bn.gamma, &g_bn)?;
            let ge = &mut g.encoders[lvl];
            ge.bn.gamma = bn.grad_gamma;
            ge.bn.beta = bn.grad_beta;
            grad = bn.grad_x;
            relu_backward_from_output(&ec.r2, &mut grad)?;
            (ge.conv2.w, ge.conv2.b) = conv3d_backward_params(&ec.r1, &grad, &enc.conv2.spec)?;
            grad = conv3d_backward_input(&enc.conv2.w, &grad, &enc.conv2.spec, extent(&ec.r1))?;
            relu_backward_from_output(&ec.r1, &mut grad)?;
            (ge.conv1.w, ge.conv1.b) = conv3d_backward_params(&ec.input, &grad, &enc.conv1.spec)?;
            if lvl > 0 {
                grad = conv3d_backward_input(&enc.conv1.w, &grad, &enc.conv1.spec, extent(&ec.input))?;
            }
        }
        Ok(g)
    }

    /// Copies the batch statistics gathered by a train-mode pass into the
    /// running averages.
    pub fn commit_running_stats(&mut self, cache: &ForwardCache<T>) {
        for (e, c) in self.encoders.iter_mut().zip(&cache.encoders) {
            e.bn.running_mean = c.running_mean.clone();
            e.bn.running_var = c.running_var.clone();
        }
    }
}

/// ReLU, or the mask of a recorded activation when one is given.
fn gate<T: Scalar>(t: &mut Tensor<T>, recorded: Option<&Tensor<T>>) -> Result<()> {
    match recorded {
        None => relu_inplace(t),
        Some(r) => {
            r.check_same_shape(t, "gated relu")?;
            for (v, &m) in t.data_mut().iter_mut().zip(r.data()) {
                if !(m > T::ZERO) {
                    *v = T::ZERO;
                }
            }
        }
    }
    Ok(())
}

/// 2×2×2 pooling that takes the elements a previous pass selected.
fn pool_with<T: Scalar>(x: &Tensor<T>, argmax: &[usize]) -> Result<PoolOutput<T>> {
    let [n, c, d, h, w] = x.dims5("gated maxpool")?;
    let shape = [n, c, d / 2, h / 2, w / 2];
    if argmax.len() != shape.iter().product::<usize>() || argmax.iter().any(|&i| i >= x.len()) {
        return Err(Error::shape("gated maxpool", format!("{} recorded choices for input {:?}", argmax.len(), x.shape())));
    }
    let y = argmax.iter().map(|&i| x.data()[i]).collect();
    Ok(PoolOutput { y: Tensor::from_vec(&shape, y)?, argmax: argmax.to_vec() })
}

fn extent<T: Scalar>(t: &Tensor<T>) -> [usize; 3] {
    let s = t.shape();
    [s[2], s[3], s[4]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCache<T> {
    pub input: Tensor<T>,
    pub r1: Tensor<T>,
    pub r2: Tensor<T>,
    pub bn: BatchNormCache<T>,
    pub argmax: Vec<usize>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderCache<T> {
    pub up_input: Tensor<T>,
    pub cat: Tensor<T>,
    pub e1: Tensor<T>,
}

/// Activations saved by [`UNetParams::forward_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache<T> {
    pub encoders: Vec<EncoderCache<T>>,
    pub bottleneck_input: Tensor<T>,
    pub bottleneck_r1: Tensor<T>,
    /// Indexed by level.
    pub decoders: Vec<DecoderCache<T>>,
    pub head_input: Tensor<T>,
}

impl<T: Scalar> Default for ForwardCache<T> {
    fn default() -> Self {
        let empty = || Tensor::zeros(&[0]);
        ForwardCache {
            encoders: Vec::new(),
            bottleneck_input: empty(),
            bottleneck_r1: empty(),
            decoders: Vec::new(),
            head_input: empty(),
        }
    }
}

/// Which half of the two-stage schedule produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Stage {
    Init,
    Pretrain,
    Final,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Pretrain => "pretrain",
            Stage::Final => "final",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Epochs completed within `stage`.
    pub epoch: usize,
    pub seed: u64,
    pub params: UNetParams<f32>,
    /// Momentum buffers, when saved.
    pub velocity: Option<UNetParams<f32>>,
}
