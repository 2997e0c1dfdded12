//! The two-stage schedule: weighted cross-entropy pretraining, then Dice
//! fine-tuning from the pretrained weights.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;
use crate::loss::{compute_class_weights, soft_dice_loss_logits, weighted_cross_entropy, ClassWeights};
use crate::metrics::per_class_dsc;
use crate::optim::sgd_momentum_step;
use crate::preprocess::{one_hot_encode, volume_to_tensor};
use crate::rng;
use crate::tensor::Tensor;
use crate::unet::{Checkpoint, Stage, UNetParams};
use crate::volume::{LabelVolume, Volume};

/// Which losses the epoch budget is spent on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Schedule {
    /// Cross-entropy for `pretrain_epochs`, then Dice for `final_epochs`.
    #[default]
    TwoStage,
    /// Dice from the start for `pretrain_epochs + final_epochs`.
    DiceOnly,
    /// Cross-entropy for `pretrain_epochs + final_epochs`.
    WceOnly,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::TwoStage => "two-stage",
            Schedule::DiceOnly => "dice-only",
            Schedule::WceOnly => "wce-only",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Schedule::TwoStage, Schedule::DiceOnly, Schedule::WceOnly].into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub final_epochs: usize,
    /// Samples whose gradients are averaged into one update.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub dice_eps: f64,
    /// Kept for configuration compatibility; must stay off.
    pub augmentation: bool,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 20,
            final_epochs: 200,
            batch_size: 1,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            dice_eps: 1e-5,
            augmentation: false,
            schedule: Schedule::TwoStage,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if !(self.dice_eps >= 0.0) {
            return Err(Error::Config(format!("Dice epsilon must be ≥ 0, got {}", self.dice_eps)));
        }
        if self.augmentation {
            return Err(Error::Config("data augmentation is not supported".into()));
        }
        Ok(())
    }

    /// `(loss, epochs)` of the two phases after applying the schedule.
    fn phases(&self) -> [(Loss, usize); 2] {
        let total = self.pretrain_epochs + self.final_epochs;
        match self.schedule {
            Schedule::TwoStage => [(Loss::Wce, self.pretrain_epochs), (Loss::Dice, self.final_epochs)],
            Schedule::DiceOnly => [(Loss::Wce, 0), (Loss::Dice, total)],
            Schedule::WceOnly => [(Loss::Wce, 0), (Loss::Wce, total)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loss {
    Wce,
    Dice,
}

/// One preprocessed training or validation subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, 1, S, S, S]`
    pub image: Tensor<f32>,
    /// `[1, 5, S, S, S]`
    pub target: Tensor<f32>,
    pub labels: LabelVolume,
}

impl Sample {
    /// From an already cropped and normalized image and its labels.
    pub fn new(image: &Volume, labels: &LabelVolume) -> Result<Self> {
        if image.dims != labels.dims {
            return Err(Error::shape("sample", format!("image {:?} vs labels {:?}", image.dims, labels.dims)));
        }
        Ok(Sample { image: volume_to_tensor(image), target: one_hot_encode(labels)?, labels: labels.clone() })
    }
}

/// Wall-clock source; the deterministic mode uses [`NoClock`].
pub trait Clock {
    fn seconds(&mut self) -> f64;
}

/// Always reads zero, so logged durations are too.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&mut self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub stage: Stage,
    /// 1-based within the stage.
    pub epoch: usize,
    /// Mean training loss over the epoch's updates.
    pub loss: f64,
    /// Mean validation DSC per class.
    pub dsc: [f64; NUM_CLASSES],
    pub seconds: f64,
}

impl EpochRecord {
    pub fn mean_foreground_dsc(&self) -> f64 {
        self.dsc[1..].iter().sum::<f64>() / (NUM_CLASSES - 1) as f64
    }
}

/// C-style `%g` with `digits` significant digits.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').unwrap_or((&sci, "0"));
    let exp: i32 = exp.parse().unwrap_or(0);
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').into()
        } else {
            s.into()
        }
    };
    if exp < -4 || exp >= digits as i32 {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        trim(&format!("{:.*}", (digits as i32 - 1 - exp) as usize, x))
    }
}

/// Per-epoch records of a run; one line per record when serialized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "stage epoch loss dsc_bg dsc_pons dsc_midbrain dsc_medulla dsc_scp seconds";

    pub fn line(r: &EpochRecord) -> String {
        let mut s = format!("{} {} {}", r.stage.name(), r.epoch, format_significant(r.loss, 6));
        for d in r.dsc {
            let _ = write!(s, " {}", format_significant(d, 6));
        }
        let _ = write!(s, " {}", format_significant(r.seconds, 6));
        s
    }

    /// Header line followed by one line per epoch.
    pub fn to_text(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&Self::line(r));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line == Self::HEADER {
                continue;
            }
            let bad = || Error::Input(format!("train log line {}: {line:?}", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 + NUM_CLASSES {
                return Err(bad());
            }
            let stage = match f[0] {
                "init" => Stage::Init,
                "pretrain" => Stage::Pretrain,
                "final" => Stage::Final,
                _ => return Err(bad()),
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let mut dsc = [0.0; NUM_CLASSES];
            for (c, d) in dsc.iter_mut().enumerate() {
                *d = num(f[3 + c])?;
            }
            records.push(EpochRecord {
                stage,
                epoch: f[1].parse().map_err(|_| bad())?,
                loss: num(f[2])?,
                dsc,
                seconds: num(f[3 + NUM_CLASSES])?,
            });
        }
        Ok(TrainLog { records })
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// State after the cross-entropy stage, when one ran.
    pub pretrain: Option<Checkpoint>,
    pub final_checkpoint: Checkpoint,
    pub log: TrainLog,
    pub class_weights: ClassWeights,
}

/// Mean per-class DSC of inference-mode predictions over `samples`.
pub fn validation_dsc(params: &UNetParams<f32>, samples: &[Sample]) -> Result<[f64; NUM_CLASSES]> {
    let mut sum = [0.0; NUM_CLASSES];
    for s in samples {
        let pred = params.predict(&s.image, s.labels.spacing)?;
        let d = per_class_dsc(&pred, &s.labels)?;
        for c in 0..NUM_CLASSES {
            sum[c] += d[c];
        }
    }
    Ok(sum.map(|v| v / samples.len() as f64))
}

fn learnable<'a>(p: &'a UNetParams<f32>) -> Vec<&'a Tensor<f32>> {
    p.named_tensors().into_iter().filter(|t| t.learnable).map(|t| t.tensor).collect()
}

/// Runs the schedule in `config` from `params`.
///
/// `observer` sees every record as soon as its epoch finishes.
pub fn train_two_stage(
    mut params: UNetParams<f32>,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    clock: &mut dyn Clock,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let weights = compute_class_weights(&train.iter().map(|s| &s.labels).collect::<Vec<_>>())?;
    let mut log = TrainLog::default();
    let mut pretrain = None;

    for (phase, (loss, epochs)) in config.phases().into_iter().enumerate() {
        if phase == 0 && epochs == 0 {
            continue;
        }
        let stage = if phase == 0 { Stage::Pretrain } else { Stage::Final };
        let mut velocity = UNetParams::<f32>::zeros(&params.config)?;
        for epoch in 1..=epochs {
            let start = clock.seconds();
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng::stream(config.seed, "shuffle", &[phase as u64, epoch as u64]));

            let mut loss_sum = 0.0;
            let mut updates = 0usize;
            for batch in order.chunks(config.batch_size) {
                let mut grads: Option<UNetParams<f32>> = None;
                let mut batch_loss = 0.0;
                for &i in batch {
                    let s = &train[i];
                    let (logits, cache) = params.forward_train(&s.image)?;
                    let out = match loss {
                        Loss::Wce => weighted_cross_entropy(&logits, &s.target, &weights)?,
                        Loss::Dice => soft_dice_loss_logits(&logits, &s.target, config.dice_eps)?,
                    };
                    if !out.loss.is_finite() || !out.grad.all_finite() {
                        return Err(Error::Diverged { stage: stage.name(), epoch });
                    }
                    batch_loss += out.loss;
                    let g = params.backward(&cache, &out.grad)?;
                    params.commit_running_stats(&cache);
                    match grads.as_mut() {
                        None => grads = Some(g),
                        Some(acc) => {
                            for (a, b) in acc.tensors_mut().into_iter().zip(g.named_tensors()) {
                                a.add_assign(b.tensor)?;
                            }
                        }
                    }
                }
                let mut grads = grads.ok_or(Error::Empty("batch"))?;
                if batch.len() > 1 {
                    let scale = 1.0 / batch.len() as f32;
                    for t in grads.tensors_mut() {
                        for v in t.data_mut() {
                            *v *= scale;
                        }
                    }
                }
                let g = learnable(&grads);
                for ((w, v), g) in params.learnable_mut().into_iter().zip(velocity.learnable_mut()).zip(g) {
                    sgd_momentum_step(w, g, v, config.learning_rate, config.momentum)?;
                }
                loss_sum += batch_loss / batch.len() as f64;
                updates += 1;
            }
            let mean_loss = loss_sum / updates as f64;
            if !mean_loss.is_finite() || params.learnable_mut().iter().any(|t| !t.all_finite()) {
                return Err(Error::Diverged { stage: stage.name(), epoch });
            }
            let dsc = validation_dsc(&params, val)?;
            let record = EpochRecord { stage, epoch, loss: mean_loss, dsc, seconds: clock.seconds() - start };
            observer(&record);
            log.records.push(record);
        }
        if stage == Stage::Pretrain {
            pretrain = Some(Checkpoint {
                stage,
                epoch: epochs,
                seed: config.seed,
                params: params.clone(),
                velocity: Some(velocity),
            });
        } else {
            let final_checkpoint =
                Checkpoint { stage, epoch: epochs, seed: config.seed, params, velocity: Some(velocity) };
            return Ok(TrainOutcome { pretrain, final_checkpoint, log, class_weights: weights });
        }
    }
    unreachable!("the final phase always returns")
}
