//! Integer-only form of a quantized network and its reference forward pass.
//!
//! Synapses carry pure integer weights. Every rescaling between grids is a
//! quantized descale `m · 2^e` (a `descale_bits`-wide mantissa) applied in
//! the receiving neuron: `floor(Σ_i acc_i · m_i · 2^e_i)`, evaluated exactly,
//! then saturated to the destination width. The simulator calls the same
//! neuron functions, so this forward is its bit-exact reference.

use serde::{Deserialize, Serialize};

use super::{dequantize, int_range, quantize_int, QTensor, QuantSpec, QuantizedNetwork};
use crate::error::{shape_err, Error, Result};
use crate::model::{argmax, NetworkConfig};
use crate::scalar::Real;

/// Width of the SSM readout accumulator before descaling.
pub const READOUT_ACC_BITS: u32 = 48;

/// A positive factor `mantissa · 2^exponent` with a `bits`-wide mantissa.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descale {
    pub mantissa: i64,
    pub exponent: i32,
}

impl Descale {
    /// Fake-quantize `v` at `bits` with the power-of-two bound just above it.
    pub fn quantize(v: f64, bits: u32) -> Result<Self> {
        if !(v > 0.0) || !v.is_finite() || !v.is_normal() {
            return Err(Error::InvalidParameter(format!("descale factor {v} must be a positive normal float")));
        }
        super::check_bits(bits)?;
        let e = ((v.to_bits() >> 52) & 0x7ff) as i32 - 1023;
        let bound = 2f64.powi(e + 1);
        let q = quantize_int(v, bits, bound).q;
        Ok(Self { mantissa: q, exponent: e + 1 - (bits as i32 - 1) })
    }

    pub fn power_of_two(exponent: i32) -> Self {
        Self { mantissa: 1, exponent }
    }

    pub fn value(&self) -> f64 {
        self.mantissa as f64 * 2f64.powi(self.exponent)
    }

    /// One unit of the mantissa.
    pub fn ulp(&self) -> f64 {
        2f64.powi(self.exponent)
    }
}

impl QTensor {
    /// The tensor's own grid step quantized as a descale factor.
    pub fn descale(&self, bits: u32) -> Result<Descale> {
        Descale::quantize(self.step(), bits)
    }
}

pub(crate) fn saturate(v: i128, bits: u32) -> i64 {
    let (lo, hi) = int_range(bits);
    v.clamp(lo as i128, hi as i128) as i64
}

fn shl_saturating(x: i128, s: u32) -> i128 {
    if x == 0 {
        return 0;
    }
    if s >= 126 || x.unsigned_abs() > (i128::MAX >> s) as u128 {
        return if x > 0 { i128::MAX } else { i128::MIN };
    }
    x << s
}

/// `floor(Σ value_i · mantissa_i · 2^exponent_i)`, exact unless the sum
/// leaves the `i128` range, in which case it saturates.
pub fn scaled_sum(terms: &[(i64, Descale)]) -> i128 {
    let e_min = terms.iter().map(|(_, d)| d.exponent).min().unwrap_or(0);
    let mut acc: i128 = 0;
    for (v, d) in terms {
        let prod = *v as i128 * d.mantissa as i128;
        acc = acc.saturating_add(shl_saturating(prod, (d.exponent - e_min) as u32));
    }
    if e_min >= 0 {
        shl_saturating(acc, e_min as u32)
    } else {
        let s = (-e_min) as u32;
        if s >= 127 {
            if acc < 0 { -1 } else { 0 }
        } else {
            acc >> s
        }
    }
}

/// Two-term [`scaled_sum`]. When both aligned products fit in `i128` for
/// any `i64` operand (decided from the descales alone) the sum is formed
/// without overflow checks.
#[inline]
pub fn scaled_sum2(v1: i64, d1: Descale, v2: i64, d2: Descale) -> i128 {
    let e_min = d1.exponent.min(d2.exponent);
    let (s1, s2) = ((d1.exponent - e_min) as u32, (d2.exponent - e_min) as u32);
    let fits = |m: i64, s: u32| s + 63 + (64 - m.unsigned_abs().leading_zeros()) <= 125;
    if e_min < 0 && e_min > -127 && fits(d1.mantissa, s1) && fits(d2.mantissa, s2) {
        let acc = ((v1 as i128 * d1.mantissa as i128) << s1) + ((v2 as i128 * d2.mantissa as i128) << s2);
        return acc >> (-e_min) as u32;
    }
    scaled_sum(&[(v1, d1), (v2, d2)])
}

/// Integer dense layer with its neuron-side descales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegerLinear {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<i64>,
    pub bias: Vec<i64>,
    /// Rescales the weight·input accumulator onto the output grid.
    pub weight_descale: Descale,
    /// Rescales the bias onto the output grid.
    pub bias_descale: Descale,
    pub relu: bool,
    pub out_bits: u32,
}

impl IntegerLinear {
    /// Output neuron dynamics given its synaptic accumulator.
    pub fn neuron(&self, o: usize, acc: i64) -> i64 {
        let v = scaled_sum2(acc, self.weight_descale, self.bias[o], self.bias_descale);
        saturate(if self.relu { v.max(0) } else { v }, self.out_bits)
    }

    pub fn apply(&self, x: &[i64], out: &mut [i64]) {
        for (o, (row, y)) in self.weight.chunks_exact(self.in_dim).zip(out.iter_mut()).enumerate() {
            let acc: i64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            *y = self.neuron(o, acc);
        }
    }
}

/// Integer SSM block. Complex diagonals are split into real and imaginary parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegerBlock {
    pub channels: usize,
    pub state_dim: usize,
    pub a_re: Vec<i64>,
    pub a_im: Vec<i64>,
    pub b_re: Vec<i64>,
    pub b_im: Vec<i64>,
    pub c_re: Vec<i64>,
    pub c_im: Vec<i64>,
    pub ssm_bias: Vec<i64>,
    /// Transition step (exact power of two for a power-of-two bound).
    pub a_descale: Descale,
    /// Input diagonal × input step onto the state grid.
    pub input_descale: Descale,
    /// `2 ×` output diagonal × state step onto the output spike grid.
    pub readout_descale: Descale,
    pub bias_descale: Descale,
    pub state_bits: u32,
    pub spike_bits: u32,
    pub mix: IntegerLinear,
}

impl IntegerBlock {
    /// Update state entry `i` (`xr`, `xi` in place) given input spike `u`.
    #[inline]
    pub fn state_update(&self, i: usize, xr: &mut i64, xi: &mut i64, u: i64) {
        let (ar, ai) = (self.a_re[i], self.a_im[i]);
        let re = ar * *xr - ai * *xi;
        let im = ar * *xi + ai * *xr;
        let nr = scaled_sum2(re, self.a_descale, self.b_re[i] * u, self.input_descale);
        let ni = scaled_sum2(im, self.a_descale, self.b_im[i] * u, self.input_descale);
        *xr = saturate(nr, self.state_bits);
        *xi = saturate(ni, self.state_bits);
    }

    /// Contribution of state entry `i` to its channel's readout accumulator.
    #[inline]
    pub fn readout_term(&self, i: usize, xr: i64, xi: i64) -> i64 {
        self.c_re[i] * xr - self.c_im[i] * xi
    }

    /// Readout neuron of channel `h`: descale, bias, ReLU, saturate.
    pub fn readout(&self, h: usize, acc: i128) -> i64 {
        let acc = saturate(acc, READOUT_ACC_BITS);
        let v = scaled_sum2(acc, self.readout_descale, self.ssm_bias[h], self.bias_descale);
        saturate(v.max(0), self.spike_bits)
    }

    /// One token through the SSM part; `y` receives the channel spikes.
    pub fn ssm_step(&self, xr: &mut [i64], xi: &mut [i64], u: &[i64], y: &mut [i64]) {
        let n = self.state_dim;
        for h in 0..self.channels {
            let mut acc: i128 = 0;
            for i in h * n..(h + 1) * n {
                self.state_update(i, &mut xr[i], &mut xi[i], u[h]);
                acc += self.readout_term(i, xr[i], xi[i]) as i128;
            }
            y[h] = self.readout(h, acc);
        }
    }
}

/// Pure-integer network extracted from a [`QuantizedNetwork`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegerNetwork {
    pub config: NetworkConfig,
    pub spec: QuantSpec,
    pub input_bound: f64,
    pub logit_bound: f64,
    pub encoder: IntegerLinear,
    pub blocks: Vec<IntegerBlock>,
    pub decoder: IntegerLinear,
}

/// Integer streaming state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntegerStream {
    pub state_re: Vec<Vec<i64>>,
    pub state_im: Vec<Vec<i64>>,
    pub logit_accumulator: Vec<i64>,
    pub last_logits: Vec<i64>,
    pub tokens_seen: usize,
}

fn step_of(bits: u32, bound: f64) -> f64 {
    super::grid_step(bits, bound)
}

fn split(v: &[i64]) -> (Vec<i64>, Vec<i64>) {
    (v.iter().step_by(2).copied().collect(), v.iter().skip(1).step_by(2).copied().collect())
}

impl IntegerNetwork {
    /// Integer payloads and descales of a fake-quantized network.
    pub fn extract(q: &QuantizedNetwork) -> Result<Self> {
        q.check_grid()?;
        let spec = q.spec;
        spec.validate()?;
        let db = spec.descale_bits;
        let act = &q.activations;
        let spike = |bound: f64| step_of(spec.spike_bits, bound);
        let lin = |l: &super::QLinear, in_step: f64, out_step: f64, relu: bool| -> Result<IntegerLinear> {
            Ok(IntegerLinear {
                out_dim: l.out_dim,
                in_dim: l.in_dim,
                weight: l.weight.integers()?,
                bias: l.bias.integers()?,
                weight_descale: Descale::quantize(l.weight.step() * in_step / out_step, db)?,
                bias_descale: Descale::quantize(l.bias.step() / out_step, db)?,
                relu,
                out_bits: spec.spike_bits,
            })
        };
        let encoder = lin(&q.encoder, spike(act.input), spike(act.encoded), false)?;
        let mut blocks = Vec::with_capacity(q.blocks.len());
        let mut in_step = spike(act.encoded);
        for (i, b) in q.blocks.iter().enumerate() {
            let x_step = step_of(spec.state_bits, act.states[i]);
            let r_step = spike(act.ssm_out[i]);
            let z_step = spike(act.mix_out[i]);
            let (a_re, a_im) = split(&b.a_bar.integers()?);
            let (b_re, b_im) = split(&b.b_bar.integers()?);
            let (c_re, c_im) = split(&b.c.integers()?);
            blocks.push(IntegerBlock {
                channels: b.channels,
                state_dim: b.state_dim,
                a_re,
                a_im,
                b_re,
                b_im,
                c_re,
                c_im,
                ssm_bias: b.ssm_bias.integers()?,
                a_descale: Descale::quantize(b.a_bar.step(), db)?,
                input_descale: Descale::quantize(b.b_bar.step() * in_step / x_step, db)?,
                readout_descale: Descale::quantize(2.0 * b.c.step() * x_step / r_step, db)?,
                bias_descale: Descale::quantize(b.ssm_bias.step() / r_step, db)?,
                state_bits: spec.state_bits,
                spike_bits: spec.spike_bits,
                mix: lin(&b.mix, r_step, z_step, true)?,
            });
            in_step = z_step;
        }
        let decoder = lin(&q.decoder, in_step, spike(act.logits), false)?;
        Ok(Self {
            config: q.config.clone(),
            spec,
            input_bound: act.input,
            logit_bound: act.logits,
            encoder,
            blocks,
            decoder,
        })
    }

    /// Tokens (channel-major `input_dim × len`) on the input spike grid,
    /// returned token-major (`len × input_dim`).
    pub fn quantize_tokens<T: Real>(&self, u: &[T]) -> Result<Vec<i64>> {
        let i = self.config.input_dim;
        if u.is_empty() || !u.len().is_multiple_of(i) {
            return shape_err(format!("input of {} values is not {i} x L", u.len()));
        }
        let len = u.len() / i;
        let mut out = vec![0; u.len()];
        for f in 0..i {
            for t in 0..len {
                out[t * i + f] = quantize_int(u[f * len + t].to_f64_lossy(), self.spec.spike_bits, self.input_bound).q;
            }
        }
        Ok(out)
    }

    pub fn logit_value(&self, q: i64) -> f64 {
        dequantize(q, self.spec.spike_bits, self.logit_bound)
    }

    pub fn new_stream(&self) -> IntegerStream {
        let n = self.config.model_dim * self.config.state_dim;
        IntegerStream {
            state_re: vec![vec![0; n]; self.blocks.len()],
            state_im: vec![vec![0; n]; self.blocks.len()],
            logit_accumulator: vec![0; self.config.num_classes],
            last_logits: vec![0; self.config.num_classes],
            tokens_seen: 0,
        }
    }

    /// Reference forward of one quantized token; returns integer logits.
    pub fn step(&self, s: &mut IntegerStream, token: &[i64]) -> Result<Vec<i64>> {
        if token.len() != self.config.input_dim {
            return shape_err(format!("token has {} features, expected {}", token.len(), self.config.input_dim));
        }
        let (lo, hi) = int_range(self.spec.spike_bits);
        if token.iter().any(|v| *v < lo || *v > hi) {
            return Err(Error::GridViolation("token outside the spike range".into()));
        }
        let h = self.config.model_dim;
        let mut a = vec![0i64; h];
        let mut r = vec![0i64; h];
        self.encoder.apply(token, &mut a);
        for (k, b) in self.blocks.iter().enumerate() {
            b.ssm_step(&mut s.state_re[k], &mut s.state_im[k], &a, &mut r);
            b.mix.apply(&r, &mut a);
        }
        let mut logits = vec![0i64; self.config.num_classes];
        self.decoder.apply(&a, &mut logits);
        for (acc, l) in s.logit_accumulator.iter_mut().zip(&logits) {
            *acc += *l;
        }
        s.last_logits.copy_from_slice(&logits);
        s.tokens_seen += 1;
        Ok(logits)
    }

    /// Run a whole token-major quantized sequence; returns the final stream
    /// and per-token logits (token-major).
    pub fn run_sequence(&self, tokens: &[i64]) -> Result<(IntegerStream, Vec<i64>)> {
        let i = self.config.input_dim;
        let mut s = self.new_stream();
        let mut out = Vec::with_capacity(tokens.len() / i * self.config.num_classes);
        for tok in tokens.chunks_exact(i) {
            out.extend(self.step(&mut s, tok)?);
        }
        Ok((s, out))
    }

    pub fn classify_stream(&self, s: &IntegerStream) -> Result<usize> {
        if s.tokens_seen == 0 {
            return Err(Error::InvalidParameter("cannot classify before any token".into()));
        }
        Ok(match self.config.readout {
            crate::model::Readout::MeanPool => argmax(&s.logit_accumulator),
            crate::model::Readout::LastToken => argmax(&s.last_logits),
        })
    }

    pub fn classify<T: Real>(&self, u: &[T]) -> Result<usize> {
        let (s, _) = self.run_sequence(&self.quantize_tokens(u)?)?;
        self.classify_stream(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Network, NetworkConfig};
    use crate::parallel::ExecPolicy;
    use crate::quant::ptq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (QuantizedNetwork, Vec<Vec<f64>>) {
        let cfg = NetworkConfig::tiny(1, 6, 4, 2, 3, 24);
        let net = Network::<f64>::init(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let calib: Vec<Vec<f64>> = (0..8).map(|_| (0..24).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        (ptq(&net, &QuantSpec::default(), &calib, ExecPolicy::Sequential).unwrap(), calib)
    }

    #[test]
    fn descale_examples() {
        let d = Descale::quantize(1.0 / 128.0, 16).unwrap();
        assert_eq!(d.value(), 1.0 / 128.0);
        assert_eq!(d.mantissa, 1 << 14);
        let d = Descale::quantize(0.3, 16).unwrap();
        assert!(d.value() <= 0.3 && 0.3 - d.value() < d.ulp());
        assert!((1 << 14..1 << 15).contains(&d.mantissa));
        assert!(Descale::quantize(0.0, 16).is_err());
        assert_eq!(Descale::power_of_two(-23).value(), 2f64.powi(-23));
    }

    #[test]
    fn scaled_sum_is_exact_floor() {
        let half = Descale { mantissa: 1, exponent: -1 };
        assert_eq!(scaled_sum(&[(3, half)]), 1);
        assert_eq!(scaled_sum(&[(-3, half)]), -2);
        assert_eq!(scaled_sum(&[(3, half), (1, half)]), 2);
        let d = Descale { mantissa: 3, exponent: 4 };
        assert_eq!(scaled_sum(&[(5, d)]), 240);
        assert_eq!(scaled_sum(&[(i64::MAX, Descale { mantissa: 1 << 14, exponent: 100 })]), i128::MAX);
    }

    #[test]
    fn extraction_round_trips() {
        let (q, _) = setup(3);
        let inet = IntegerNetwork::extract(&q).unwrap();
        assert_eq!(inet.encoder.weight, q.encoder.weight.integers().unwrap());
        for (_, t) in q.tensors() {
            let d = t.descale(16).unwrap();
            for (v, i) in t.values.iter().zip(t.integers().unwrap()) {
                let back = i as f64 * d.value();
                assert!((back - v).abs() <= i.unsigned_abs() as f64 * d.ulp() + 1e-300, "{back} vs {v}");
            }
        }
        let w = QTensor::quantize(&[0.5, -1.0], 8, 1.0).unwrap();
        assert_eq!(w.integers().unwrap()[0], 64);
        assert_eq!(w.descale(16).unwrap().value(), 1.0 / 128.0);
        let z = QTensor::quantize(&[0.0; 3], 8, 1e-8).unwrap();
        assert_eq!(z.integers().unwrap(), vec![0; 3]);
    }

    #[test]
    fn extraction_rejects_off_grid_networks() {
        let (mut q, _) = setup(4);
        q.blocks[0].mix.weight.values[0] += 1e-5;
        assert!(matches!(IntegerNetwork::extract(&q), Err(Error::GridViolation(_))));
    }

    #[test]
    fn integer_forward_tracks_float_forward() {
        let (q, calib) = setup(5);
        let inet = IntegerNetwork::extract(&q).unwrap();
        let d = q.to_discrete::<f64>();
        for u in &calib {
            let (_, want) = d.forward_stream_seq(u).unwrap();
            let (_, got) = inet.run_sequence(&inet.quantize_tokens(u).unwrap()).unwrap();
            let c = inet.config.num_classes;
            let len = u.len();
            let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for t in 0..len {
                for k in 0..c {
                    let err = (inet.logit_value(got[t * c + k]) - want[k * len + t]).abs();
                    assert!(err < 1e-3 * scale.max(1.0), "t={t} k={k} err={err}");
                }
            }
        }
    }

    #[test]
    fn reference_forward_is_deterministic() {
        let (q, calib) = setup(6);
        let inet = IntegerNetwork::extract(&q).unwrap();
        let toks = inet.quantize_tokens(&calib[0]).unwrap();
        assert_eq!(inet.run_sequence(&toks).unwrap(), inet.run_sequence(&toks).unwrap());
        assert!(inet.step(&mut inet.new_stream(), &[1 << 30]).is_err());
    }

    proptest! {
        #[test]
        fn two_term_fast_path_matches_general(
            a in any::<i64>(), b in any::<i64>(), m1 in 1i64..(1 << 15), m2 in 1i64..(1 << 15), e1 in -130i32..40, e2 in -130i32..40,
        ) {
            let (d1, d2) = (Descale { mantissa: m1, exponent: e1 }, Descale { mantissa: m2, exponent: e2 });
            prop_assert_eq!(scaled_sum2(a, d1, b, d2), scaled_sum(&[(a, d1), (b, d2)]));
            let (a, b) = (a >> 20, b >> 30);
            prop_assert_eq!(scaled_sum2(a, d1, b, d2), scaled_sum(&[(a, d1), (b, d2)]));
        }

        #[test]
        fn scaled_sum_matches_float_floor(a in -(1i64 << 40)..(1i64 << 40), m in 1i64..(1 << 15), e in -60i32..-10) {
            let want = ((a as f64) * (m as f64) * 2f64.powi(e)).floor();
            let got = scaled_sum(&[(a, Descale { mantissa: m, exponent: e })]);
            // compare in exact integer arithmetic where floats are exact enough
            let exact = ((a as i128) * (m as i128)) >> (-e);
            prop_assert_eq!(got, exact);
            prop_assert!((got as f64 - want).abs() <= 1.0);
        }

        #[test]
        fn descale_within_one_ulp(v in 1e-12f64..1e6) {
            let d = Descale::quantize(v, 16).unwrap();
            prop_assert!(d.value() <= v);
            prop_assert!(v - d.value() < d.ulp());
            prop_assert!((1 << 14..1 << 15).contains(&d.mantissa));
        }
    }
}
