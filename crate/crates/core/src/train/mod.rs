//! Float training, quantization-aware fine-tuning and evaluation.

mod conv;
mod params;
mod recurrent;

pub use conv::{chain_to_continuous, conv_discrete_grads, conv_grads, conv_loss, BatchGrads, SHARD};
pub use params::{Adam, AdamConfig, ParamKind, ParamSet, MAX_RE_A};
pub use recurrent::{recurrent_discrete_grads, recurrent_grads, recurrent_logits, recurrent_loss, ActivationClamp};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::model::{DiscreteNetwork, Network};
use crate::parallel::{map_range, ExecPolicy};
use crate::quant::{project_transitions, quantize_int, IntegerNetwork, QuantizedNetwork};
use crate::ssm::FftConvolver;

/// How gradients are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// FFT convolution over the whole sequence.
    #[default]
    Conv,
    /// Backpropagation through the unrolled recurrence.
    Recurrent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ssm_lr_factor: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Cosine decay of the learning rate to zero over all steps.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 4e-3,
            ssm_lr_factor: 0.25,
            seed: 0,
            mode: TrainMode::Conv,
            cosine_decay: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(self.ssm_lr_factor >= 0.0 && self.ssm_lr_factor.is_finite()) {
            return Err(Error::Config("ssm_lr_factor must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ssm_lr_factor: self.ssm_lr_factor, ..AdamConfig::default() }
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine_decay || total == 0 {
            return self.learning_rate;
        }
        let p = step as f64 / total as f64;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 = the starting point).
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
    /// Test accuracy before the first update.
    pub initial_test_accuracy: f64,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// The report with timings zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.wall_seconds = 0.0;
        r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    }
}

const EVAL_CHUNK: usize = 16;

fn check_dataset(net: &crate::model::NetworkConfig, data: &SequenceDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    if data.input_dim != net.input_dim {
        return Err(Error::Data(format!("dataset has {} input features, model expects {}", data.input_dim, net.input_dim)));
    }
    Ok(())
}

/// Mean loss and accuracy of the float network in convolution mode.
pub fn evaluate_float(d: &DiscreteNetwork<f32>, data: &SequenceDataset, policy: ExecPolicy) -> Result<(f64, f64)> {
    check_dataset(&d.config, data)?;
    let conv = FftConvolver::new(data.seq_len);
    let spectra = d.kernel_spectra(&conv)?;
    let c = d.config.num_classes;
    let parts = map_range(policy, data.len().div_ceil(EVAL_CHUNK), |k| -> Result<(f64, usize)> {
        let (mut loss, mut correct) = (0.0, 0);
        for i in k * EVAL_CHUNK..((k + 1) * EVAL_CHUNK).min(data.len()) {
            let logits = d.forward_conv_with(&data.inputs[i], &conv, &spectra)?.logits;
            let (l, pred, _) = conv::readout_backward(&logits, c, data.labels[i], d.config.readout);
            loss += l;
            correct += usize::from(pred == data.labels[i]);
        }
        Ok((loss, correct))
    });
    let (mut loss, mut correct) = (0.0, 0);
    for p in parts {
        let (l, c) = p?;
        loss += l;
        correct += c;
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Accuracy of the float network run token by token.
pub fn evaluate_streaming(d: &DiscreteNetwork<f32>, data: &SequenceDataset, policy: ExecPolicy) -> Result<f64> {
    check_dataset(&d.config, data)?;
    let parts = map_range(policy, data.len().div_ceil(EVAL_CHUNK), |k| -> Result<usize> {
        let mut correct = 0;
        for i in k * EVAL_CHUNK..((k + 1) * EVAL_CHUNK).min(data.len()) {
            let (ctx, _) = d.forward_stream_seq(&data.inputs[i])?;
            correct += usize::from(ctx.classify(d.config.readout)? == data.labels[i]);
        }
        Ok(correct)
    });
    let mut correct = 0;
    for p in parts {
        correct += p?;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy of the bit-accurate integer reference.
pub fn evaluate_integer(net: &IntegerNetwork, data: &SequenceDataset, policy: ExecPolicy) -> Result<f64> {
    check_dataset(&net.config, data)?;
    let parts = map_range(policy, data.len().div_ceil(EVAL_CHUNK), |k| -> Result<usize> {
        let mut correct = 0;
        for i in k * EVAL_CHUNK..((k + 1) * EVAL_CHUNK).min(data.len()) {
            correct += usize::from(net.classify(&data.inputs[i])? == data.labels[i]);
        }
        Ok(correct)
    });
    let mut correct = 0;
    for p in parts {
        correct += p?;
    }
    Ok(correct as f64 / data.len() as f64)
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

fn diverged(epoch: usize, batch: usize, loss: f64) -> Error {
    Error::Numeric(format!("training diverged at epoch {epoch}, batch {batch} (loss {loss})"))
}

/// Train a float network with Adam. The parameters with the best test
/// accuracy are returned; ties keep the earlier epoch.
pub fn train(
    net: &Network<f32>,
    train_set: &SequenceDataset,
    test_set: &SequenceDataset,
    cfg: &TrainConfig,
    policy: ExecPolicy,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Network<f32>, TrainReport)> {
    cfg.validate()?;
    net.validate()?;
    check_dataset(&net.config, train_set)?;
    let start = Instant::now();
    let mut cur = net.clone();
    let mut adam = Adam::new(cfg.adam(), &cur);
    let (_, acc0) = evaluate_float(&cur.discretize()?, test_set, policy)?;
    let mut best = (cur.clone(), 0, acc0);
    let mut report = TrainReport { initial_test_accuracy: acc0, ..Default::default() };
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let order = shuffled(train_set.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            adam.config.learning_rate = cfg.lr_at((epoch - 1) * per_epoch + b, total);
            let (inputs, labels) = train_set.batch(idx);
            let bg = match cfg.mode {
                TrainMode::Conv => conv_grads(&cur, &inputs, &labels, policy)?,
                TrainMode::Recurrent => recurrent_grads(&cur, &inputs, &labels, policy)?,
            };
            if !bg.loss.is_finite() || !bg.grads.all_finite() {
                return Err(diverged(epoch, b, bg.loss));
            }
            loss_sum += bg.loss * idx.len() as f64;
            correct += bg.correct;
            adam.step(&mut cur, &bg.grads);
            if !cur.all_finite() {
                return Err(diverged(epoch, b, bg.loss));
            }
        }
        let (test_loss, test_acc) = evaluate_float(&cur.discretize()?, test_set, policy)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_loss: Some(test_loss),
            test_accuracy: test_acc,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        if test_acc > best.2 {
            best = (cur.clone(), epoch, test_acc);
        }
        report.epochs.push(rec);
    }
    report.best_epoch = best.1;
    report.best_test_accuracy = best.2;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((best.0, report))
}

/// Zero the gradient of every parameter whose value saturates its grid
/// (straight-through estimator with clipping).
fn mask_saturated(q: &QuantizedNetwork, shadow: &DiscreteNetwork<f32>, grads: &mut DiscreteNetwork<f32>) {
    let tensors = q.tensors();
    for ((_, t), ((_, p), (_, g))) in tensors.iter().zip(shadow.params().into_iter().zip(grads.params_mut())) {
        for (v, gv) in p.iter().zip(g.iter_mut()) {
            if quantize_int(*v as f64, t.bits, t.bound).saturated {
                *gv = 0.0;
            }
        }
    }
}

/// Quantization-aware fine-tuning.
///
/// A float shadow copy of the discrete parameters is updated with gradients
/// of the recurrent forward evaluated at the quantized parameters, with
/// activations clamped to the calibrated ranges. Quantization grids (bounds)
/// stay fixed. After every epoch the shadow is requantized and scored with
/// the integer reference; the best fine-tuned epoch is returned (the input
/// network only when `epochs` is 0).
pub fn qaft(
    start: &QuantizedNetwork,
    train_set: &SequenceDataset,
    test_set: &SequenceDataset,
    cfg: &TrainConfig,
    policy: ExecPolicy,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(QuantizedNetwork, TrainReport)> {
    cfg.validate()?;
    start.check_grid()?;
    check_dataset(&start.config, train_set)?;
    let t_start = Instant::now();
    let acc0 = evaluate_integer(&IntegerNetwork::extract(start)?, test_set, policy)?;
    let mut report = TrainReport { best_test_accuracy: acc0, initial_test_accuracy: acc0, ..Default::default() };
    let mut best = start.clone();
    let mut shadow: DiscreteNetwork<f32> = start.to_discrete();
    let clamp = ActivationClamp::from_bounds(&start.activations);
    let mut adam = Adam::new(cfg.adam(), &shadow);
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let order = shuffled(train_set.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            adam.config.learning_rate = cfg.lr_at((epoch - 1) * per_epoch + b, total);
            let exposed = start.requantize_from(&shadow)?;
            let fq: DiscreteNetwork<f32> = exposed.to_discrete();
            let (inputs, labels) = train_set.batch(idx);
            let mut bg = recurrent_discrete_grads(&fq, &clamp, &inputs, &labels, policy)?;
            if !bg.loss.is_finite() || !bg.grads.all_finite() {
                return Err(diverged(epoch, b, bg.loss));
            }
            mask_saturated(start, &shadow, &mut bg.grads);
            loss_sum += bg.loss * idx.len() as f64;
            correct += bg.correct;
            adam.step(&mut shadow, &bg.grads);
            for blk in &mut shadow.blocks {
                project_transitions(&mut blk.ssm.a_bar);
            }
        }
        let candidate = start.requantize_from(&shadow)?;
        let acc = evaluate_integer(&IntegerNetwork::extract(&candidate)?, test_set, policy)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_loss: None,
            test_accuracy: acc,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        if epoch == 1 || acc > report.best_test_accuracy {
            report.best_test_accuracy = acc;
            report.best_epoch = epoch;
            best = candidate;
        }
        report.epochs.push(rec);
    }
    report.wall_seconds = t_start.elapsed().as_secs_f64();
    Ok((best, report))
}
