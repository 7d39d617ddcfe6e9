//! Post-training quantization of a trained network.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::{fake_quantize, select_bound, QTensor, QuantSpec, TensorRole, BOUND_FLOOR};
use crate::error::{shape_err, Error, Result};
use crate::model::{DiscreteBlock, DiscreteNetwork, Linear, Network, NetworkConfig, Tap};
use crate::parallel::{map_slice, ExecPolicy};
use crate::scalar::{cast_slice, Real};
use crate::ssm::DiscreteSSMParams;

/// Calibrated activation maxima are widened by this factor.
pub const CALIBRATION_HEADROOM: f64 = 2.0;
pub const MIN_CALIBRATION_SAMPLES: usize = 256;
/// Transition magnitudes are kept at or below `1 - 2^-20` before quantizing.
pub const MAX_TRANSITION_MAGNITUDE: f64 = 1.0 - 1.0 / (1u64 << 20) as f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QLinear {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: QTensor,
    pub bias: QTensor,
}

impl QLinear {
    fn quantize<T: Real>(l: &Linear<T>, bits: u32) -> Result<Self> {
        let w: Vec<f64> = cast_slice(&l.weight);
        let b: Vec<f64> = cast_slice(&l.bias);
        Self::with_bounds(l, bits, select_bound(TensorRole::Weight, &w), select_bound(TensorRole::Bias, &b))
    }

    fn with_bounds<T: Real>(l: &Linear<T>, bits: u32, w_bound: f64, b_bound: f64) -> Result<Self> {
        Ok(Self {
            out_dim: l.out_dim,
            in_dim: l.in_dim,
            weight: QTensor::quantize(&cast_slice::<T, f64>(&l.weight), bits, w_bound)?,
            bias: QTensor::quantize(&cast_slice::<T, f64>(&l.bias), bits, b_bound)?,
        })
    }

    pub fn to_linear<T: Real>(&self) -> Linear<T> {
        Linear { out_dim: self.out_dim, in_dim: self.in_dim, weight: cast_slice(&self.weight.values), bias: cast_slice(&self.bias.values) }
    }

    fn tensors(&self) -> [&QTensor; 2] {
        [&self.weight, &self.bias]
    }
}

/// Quantized block. Complex tensors are interleaved `[re, im, re, im, ...]`
/// with one bound shared by both parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QBlock {
    pub channels: usize,
    pub state_dim: usize,
    pub a_bar: QTensor,
    pub b_bar: QTensor,
    pub c: QTensor,
    pub ssm_bias: QTensor,
    pub mix: QLinear,
}

impl QBlock {
    fn tensors(&self) -> [&QTensor; 6] {
        [&self.a_bar, &self.b_bar, &self.c, &self.ssm_bias, &self.mix.weight, &self.mix.bias]
    }
}

/// Calibrated bounds of every spike-carrying activation and of the SSM states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationBounds {
    pub input: f64,
    pub encoded: f64,
    pub states: Vec<f64>,
    pub ssm_out: Vec<f64>,
    pub mix_out: Vec<f64>,
    pub logits: f64,
}

impl ActivationBounds {
    fn zeros(blocks: usize) -> Self {
        Self {
            input: 0.0,
            encoded: 0.0,
            states: vec![0.0; blocks],
            ssm_out: vec![0.0; blocks],
            mix_out: vec![0.0; blocks],
            logits: 0.0,
        }
    }

    fn merge(mut self, o: &Self) -> Self {
        self.input = self.input.max(o.input);
        self.encoded = self.encoded.max(o.encoded);
        self.logits = self.logits.max(o.logits);
        for (a, b) in [(&mut self.states, &o.states), (&mut self.ssm_out, &o.ssm_out), (&mut self.mix_out, &o.mix_out)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x = x.max(*y));
        }
        self
    }

    fn widened(mut self, factor: f64) -> Self {
        let w = |v: &mut f64| *v = (*v * factor).max(BOUND_FLOOR);
        w(&mut self.input);
        w(&mut self.encoded);
        w(&mut self.logits);
        self.states.iter_mut().chain(&mut self.ssm_out).chain(&mut self.mix_out).for_each(w);
        self
    }
}

/// A network whose every parameter lies on its quantization grid, together
/// with the bounds that define those grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedNetwork {
    pub config: NetworkConfig,
    pub spec: QuantSpec,
    pub encoder: QLinear,
    pub blocks: Vec<QBlock>,
    pub decoder: QLinear,
    pub activations: ActivationBounds,
}

fn interleave<T: Real>(v: &[Complex<T>]) -> Vec<f64> {
    v.iter().flat_map(|z| [z.re.to_f64_lossy(), z.im.to_f64_lossy()]).collect()
}

fn deinterleave<T: Real>(v: &[f64]) -> Vec<Complex<T>> {
    v.chunks_exact(2).map(|p| Complex::new(T::lit(p[0]), T::lit(p[1]))).collect()
}

/// Scale transition entries down onto the disc of radius [`MAX_TRANSITION_MAGNITUDE`].
pub fn project_transitions<T: Real>(a_bar: &mut [Complex<T>]) {
    let limit = T::lit(MAX_TRANSITION_MAGNITUDE);
    for z in a_bar {
        let r = z.norm();
        if r > limit {
            *z = *z * (limit / r);
        }
    }
}

impl QuantizedNetwork {
    /// Quantize parameters of `d` using the bounds and widths of `self`.
    /// Activation bounds are kept.
    pub fn requantize_from<T: Real>(&self, d: &DiscreteNetwork<T>) -> Result<Self> {
        if d.config != self.config {
            return shape_err("network configuration differs from the quantized network");
        }
        let wb = self.spec.weight_bits;
        let sb = self.spec.state_bits;
        let lin = |l: &Linear<T>, q: &QLinear| QLinear::with_bounds(l, wb, q.weight.bound, q.bias.bound);
        let blocks = d
            .blocks
            .iter()
            .zip(&self.blocks)
            .map(|(b, q)| {
                let mut a = b.ssm.a_bar.clone();
                project_transitions(&mut a);
                Ok(QBlock {
                    channels: q.channels,
                    state_dim: q.state_dim,
                    a_bar: QTensor::quantize(&interleave(&a), sb, q.a_bar.bound)?,
                    b_bar: QTensor::quantize(&interleave(&b.ssm.b_bar), sb, q.b_bar.bound)?,
                    c: QTensor::quantize(&interleave(&b.ssm.c_bar), sb, q.c.bound)?,
                    ssm_bias: QTensor::quantize(&cast_slice::<T, f64>(&b.ssm_bias), wb, q.ssm_bias.bound)?,
                    mix: lin(&b.mix, &q.mix)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: self.config.clone(),
            spec: self.spec,
            encoder: lin(&d.encoder, &self.encoder)?,
            blocks,
            decoder: lin(&d.decoder, &self.decoder)?,
            activations: self.activations.clone(),
        })
    }

    /// Re-apply fake quantization to every stored tensor with its own bound.
    pub fn requantize(&self) -> Result<Self> {
        let mut out = self.clone();
        let mut all: Vec<&mut QTensor> = vec![&mut out.encoder.weight, &mut out.encoder.bias, &mut out.decoder.weight, &mut out.decoder.bias];
        for b in &mut out.blocks {
            all.extend([&mut b.a_bar, &mut b.b_bar, &mut b.c, &mut b.ssm_bias, &mut b.mix.weight, &mut b.mix.bias]);
        }
        for t in all {
            t.values = fake_quantize(&t.values, t.bits, t.bound)?;
        }
        Ok(out)
    }

    pub fn tensors(&self) -> Vec<(String, &QTensor)> {
        let [ew, eb] = self.encoder.tensors();
        let mut v = vec![("encoder.weight".to_string(), ew), ("encoder.bias".to_string(), eb)];
        let names = ["a_bar", "b_bar", "c", "ssm_bias", "mix.weight", "mix.bias"];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in names.iter().zip(b.tensors()) {
                v.push((format!("blocks.{i}.{n}"), t));
            }
        }
        let [dw, db] = self.decoder.tensors();
        v.push(("decoder.weight".to_string(), dw));
        v.push(("decoder.bias".to_string(), db));
        v
    }

    /// Every parameter tensor is on its grid.
    pub fn check_grid(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            t.integers().map_err(|e| Error::GridViolation(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// The dequantized parameters as a float network.
    pub fn to_discrete<T: Real>(&self) -> DiscreteNetwork<T> {
        DiscreteNetwork {
            config: self.config.clone(),
            encoder: self.encoder.to_linear(),
            blocks: self
                .blocks
                .iter()
                .map(|b| DiscreteBlock {
                    ssm: DiscreteSSMParams {
                        channels: b.channels,
                        state_dim: b.state_dim,
                        a_bar: deinterleave(&b.a_bar.values),
                        b_bar: deinterleave(&b.b_bar.values),
                        c_bar: deinterleave(&b.c.values),
                    },
                    ssm_bias: cast_slice(&b.ssm_bias.values),
                    mix: b.mix.to_linear(),
                })
                .collect(),
            decoder: self.decoder.to_linear(),
        }
    }
}

/// Running maxima of every activation over streamed calibration samples.
fn calibrate(d: &DiscreteNetwork<f64>, samples: &[Vec<f64>], policy: ExecPolicy) -> Result<ActivationBounds> {
    let nb = d.blocks.len();
    let i = d.config.input_dim;
    let per_sample = map_slice(policy, samples, |u| -> Result<ActivationBounds> {
        if u.is_empty() || u.len() % i != 0 {
            return shape_err(format!("calibration sample of {} values is not {i} x L", u.len()));
        }
        let len = u.len() / i;
        let mut m = ActivationBounds::zeros(nb);
        let absmax = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        m.input = absmax(u);
        let mut ctx = d.new_context();
        let mut tok = vec![0.0; i];
        for t in 0..len {
            for (f, v) in tok.iter_mut().enumerate() {
                *v = u[f * len + t];
            }
            d.forward_stream_observed(&mut ctx, &tok, &mut |tap, v| {
                let slot = match tap {
                    Tap::Encoded => &mut m.encoded,
                    Tap::State(b) => &mut m.states[b],
                    Tap::SsmOut(b) => &mut m.ssm_out[b],
                    Tap::MixOut(b) => &mut m.mix_out[b],
                    Tap::Logits => &mut m.logits,
                };
                *slot = slot.max(absmax(v));
            })?;
        }
        if !m.logits.is_finite() {
            return Err(Error::Numeric("non-finite activation during calibration".into()));
        }
        Ok(m)
    });
    let mut acc = ActivationBounds::zeros(nb);
    for m in per_sample {
        acc = acc.merge(&m?);
    }
    Ok(acc)
}

/// Post-training quantization: weights and biases at `weight_bits` with
/// max-abs bounds, discretized SSM diagonals at `state_bits` (transition
/// bound 1, input/output diagonals max-abs over both parts), and activation
/// bounds calibrated by streaming `calib` through the quantized parameters.
pub fn ptq<T: Real>(net: &Network<T>, spec: &QuantSpec, calib: &[Vec<T>], policy: ExecPolicy) -> Result<QuantizedNetwork> {
    spec.validate()?;
    if calib.is_empty() {
        return Err(Error::Data("post-training quantization needs calibration samples".into()));
    }
    let d = net.discretize()?;
    let wb = spec.weight_bits;
    let sb = spec.state_bits;
    let blocks = d
        .blocks
        .iter()
        .map(|b| {
            let mut a = b.ssm.a_bar.clone();
            project_transitions(&mut a);
            let a = interleave(&a);
            let bb = interleave(&b.ssm.b_bar);
            let c = interleave(&b.ssm.c_bar);
            let bias: Vec<f64> = cast_slice(&b.ssm_bias);
            Ok(QBlock {
                channels: b.ssm.channels,
                state_dim: b.ssm.state_dim,
                a_bar: QTensor::quantize(&a, sb, select_bound(TensorRole::SsmABar, &a))?,
                b_bar: QTensor::quantize(&bb, sb, select_bound(TensorRole::SsmBBar, &bb))?,
                c: QTensor::quantize(&c, sb, select_bound(TensorRole::SsmC, &c))?,
                ssm_bias: QTensor::quantize(&bias, wb, select_bound(TensorRole::Bias, &bias))?,
                mix: QLinear::quantize(&b.mix, wb)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut q = QuantizedNetwork {
        config: net.config.clone(),
        spec: *spec,
        encoder: QLinear::quantize(&d.encoder, wb)?,
        blocks,
        decoder: QLinear::quantize(&d.decoder, wb)?,
        activations: ActivationBounds::zeros(net.config.num_blocks),
    };
    let samples: Vec<Vec<f64>> = calib.iter().map(|s| cast_slice(s)).collect();
    q.activations = calibrate(&q.to_discrete(), &samples, policy)?.widened(CALIBRATION_HEADROOM);
    Ok(q)
}
