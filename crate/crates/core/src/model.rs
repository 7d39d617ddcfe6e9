//! The classification network: linear encoder, a stack of SSM blocks
//! (SSM → bias → ReLU → mixing linear → ReLU) and a per-token linear decoder.
//!
//! Sequences are stored channel-major (`channels × len`), tokens as plain
//! vectors. [`Network`] holds continuous SSM parameters and is what training
//! updates; [`DiscreteNetwork`] holds the discretized diagonals and is what
//! both inference modes run.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::scalar::{cast_complex, cast_slice, complex_as_reals, Real};
use crate::ssm::{
    discretize, materialize_kernel, step_in_place, DiagonalSSMParams, DiscreteSSMParams, FftConvolver,
    SSMState,
};

/// How per-token logits become one decision per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    MeanPool,
    LastToken,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub state_dim: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    pub readout: Readout,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::small(1, 784)
    }
}

impl NetworkConfig {
    /// H=64, N=32: the MNIST-sized model.
    pub fn small(input_dim: usize, seq_len: usize) -> Self {
        Self {
            input_dim,
            model_dim: 64,
            state_dim: 32,
            num_blocks: 4,
            num_classes: 10,
            seq_len,
            readout: Readout::MeanPool,
        }
    }

    /// H=128, N=64: the CIFAR-sized model.
    pub fn large(input_dim: usize, seq_len: usize) -> Self {
        Self { model_dim: 128, state_dim: 64, ..Self::small(input_dim, seq_len) }
    }

    pub fn tiny(input_dim: usize, model_dim: usize, state_dim: usize, num_blocks: usize, num_classes: usize, seq_len: usize) -> Self {
        Self { input_dim, model_dim, state_dim, num_blocks, num_classes, seq_len, readout: Readout::MeanPool }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("state_dim", self.state_dim),
            ("num_blocks", self.num_blocks),
            ("num_classes", self.num_classes),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Number of real scalars stored by a network with this configuration.
/// Complex entries count twice.
pub fn count_parameters(cfg: &NetworkConfig) -> usize {
    let (i, h, n) = (cfg.input_dim, cfg.model_dim, cfg.state_dim);
    let encoder = h * i + h;
    let block = 3 * 2 * h * n + h + h + h * h + h;
    let decoder = cfg.num_classes * h + cfg.num_classes;
    encoder + cfg.num_blocks * block + decoder
}

/// Dense layer `y = W x + b` with `W` stored row-major `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { out_dim, in_dim, weight: vec![T::zero(); out_dim * in_dim], bias: vec![T::zero(); out_dim] }
    }

    fn init_uniform(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let r = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| T::lit(rng.gen_range(-r..=r))).collect::<Vec<T>>();
        let weight = draw(out_dim * in_dim);
        let bias = draw(out_dim);
        Self { out_dim, in_dim, weight, bias }
    }

    pub fn check_shapes(&self) -> Result<()> {
        if self.weight.len() != self.out_dim * self.in_dim || self.bias.len() != self.out_dim {
            return shape_err(format!("linear layer {}x{} has inconsistent buffers", self.out_dim, self.in_dim));
        }
        Ok(())
    }

    pub fn weight_mat(&self) -> MatRef<'_, T> {
        MatRef::row_major(&self.weight, self.out_dim, self.in_dim)
    }

    /// Apply to a channel-major sequence `in_dim × len`.
    pub fn apply_seq(&self, x: &[T], len: usize, relu: bool) -> Vec<T> {
        let mut y = Vec::with_capacity(self.out_dim * len);
        for b in &self.bias {
            y.extend(std::iter::repeat_n(*b, len));
        }
        gemm(T::one(), self.weight_mat(), MatRef::row_major(x, self.in_dim, len), T::one(), &mut y);
        if relu {
            relu_in_place(&mut y);
        }
        y
    }

    /// Apply to one token.
    pub fn apply_token(&self, x: &[T], out: &mut [T], relu: bool) {
        for (o, (row, b)) in out.iter_mut().zip(self.weight.chunks_exact(self.in_dim).zip(&self.bias)) {
            let v = row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + *w * *xi);
            *o = if relu { v.max(T::zero()) } else { v };
        }
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear { out_dim: self.out_dim, in_dim: self.in_dim, weight: cast_slice(&self.weight), bias: cast_slice(&self.bias) }
    }
}

pub fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        *x = x.max(T::zero());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ssm: DiagonalSSMParams<T>,
    pub ssm_bias: Vec<T>,
    pub mix: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub encoder: Linear<T>,
    pub blocks: Vec<Block<T>>,
    pub decoder: Linear<T>,
}

impl<T: Real> Network<T> {
    /// Deterministic initialization: diagonal `a = -0.5 + iπn`, `b = 1`,
    /// `c` standard complex normal, `dt` log-uniform on `[0.001, 0.1]`,
    /// linear layers uniform on `±1/sqrt(fan_in)`, SSM biases zero.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, n) = (config.model_dim, config.state_dim);
        let half = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
        let encoder = Linear::init_uniform(h, config.input_dim, &mut rng);
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for _ in 0..config.num_blocks {
            let a = (0..h * n)
                .map(|i| Complex::new(-0.5, std::f64::consts::PI * (i % n) as f64))
                .collect::<Vec<_>>();
            let b = vec![Complex::new(1.0, 0.0); h * n];
            let c = (0..h * n).map(|_| Complex::new(half.sample(&mut rng), half.sample(&mut rng))).collect::<Vec<_>>();
            let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
            let dt = (0..h).map(|_| T::lit(rng.gen_range(lo..=hi).exp().clamp(0.001, 0.1))).collect();
            let ssm = DiagonalSSMParams::new(h, n, cast_complex(&a), cast_complex(&b), cast_complex(&c), dt)?;
            let mix = Linear::init_uniform(h, h, &mut rng);
            blocks.push(Block { ssm, ssm_bias: vec![T::zero(); h], mix });
        }
        let decoder = Linear::init_uniform(config.num_classes, h, &mut rng);
        Ok(Self { config: config.clone(), encoder, blocks, decoder })
    }

    /// Count of every stored real scalar, enumerated from the buffers.
    pub fn stored_scalar_count(&self) -> usize {
        let lin = |l: &Linear<T>| l.weight.len() + l.bias.len();
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| 2 * (b.ssm.a.len() + b.ssm.b.len() + b.ssm.c.len()) + b.ssm.dt.len() + b.ssm_bias.len() + lin(&b.mix))
            .sum();
        lin(&self.encoder) + blocks + lin(&self.decoder)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let (h, n) = (cfg.model_dim, cfg.state_dim);
        let dims_ok = self.encoder.out_dim == h
            && self.encoder.in_dim == cfg.input_dim
            && self.decoder.out_dim == cfg.num_classes
            && self.decoder.in_dim == h
            && self.blocks.len() == cfg.num_blocks;
        if !dims_ok {
            return shape_err("network layers do not match its configuration");
        }
        self.encoder.check_shapes()?;
        self.decoder.check_shapes()?;
        for b in &self.blocks {
            b.ssm.validate()?;
            b.mix.check_shapes()?;
            if b.ssm.channels != h || b.ssm.state_dim != n || b.ssm_bias.len() != h || b.mix.out_dim != h || b.mix.in_dim != h {
                return shape_err("block does not match model/state dimensions");
            }
        }
        Ok(())
    }

    pub fn discretize(&self) -> Result<DiscreteNetwork<T>> {
        self.validate()?;
        let blocks = self
            .blocks
            .iter()
            .map(|b| Ok(DiscreteBlock { ssm: discretize(&b.ssm)?, ssm_bias: b.ssm_bias.clone(), mix: b.mix.clone() }))
            .collect::<Result<Vec<_>>>()?;
        Ok(DiscreteNetwork {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            blocks,
            decoder: self.decoder.clone(),
        })
    }

    /// Per-token logits (`num_classes × len`) in convolution mode.
    pub fn forward_conv(&self, u: &[T]) -> Result<Vec<T>> {
        self.discretize()?.forward_conv(u)
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ssm: DiagonalSSMParams {
                        channels: b.ssm.channels,
                        state_dim: b.ssm.state_dim,
                        a: cast_complex(&b.ssm.a),
                        b: cast_complex(&b.ssm.b),
                        c: cast_complex(&b.ssm.c),
                        dt: cast_slice(&b.ssm.dt),
                    },
                    ssm_bias: cast_slice(&b.ssm_bias),
                    mix: b.mix.cast(),
                })
                .collect(),
            decoder: self.decoder.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteBlock<T> {
    pub ssm: DiscreteSSMParams<T>,
    pub ssm_bias: Vec<T>,
    pub mix: Linear<T>,
}

/// Network with discretized SSM diagonals; runs both inference modes.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteNetwork<T> {
    pub config: NetworkConfig,
    pub encoder: Linear<T>,
    pub blocks: Vec<DiscreteBlock<T>>,
    pub decoder: Linear<T>,
}

/// Activations recorded by a convolution-mode forward pass, each
/// channel-major over the sequence.
#[derive(Clone, Debug)]
pub struct ConvTrace<T> {
    pub encoded: Vec<T>,
    /// Per block: ReLU output after the SSM and its bias.
    pub ssm_out: Vec<Vec<T>>,
    /// Per block: ReLU output after the mixing layer.
    pub mix_out: Vec<Vec<T>>,
    pub logits: Vec<T>,
}

impl<T: Real> DiscreteNetwork<T> {
    fn check_input(&self, u: &[T]) -> Result<usize> {
        let i = self.config.input_dim;
        if u.is_empty() || !u.len().is_multiple_of(i) {
            return shape_err(format!("input of {} values is not {i} x L", u.len()));
        }
        Ok(u.len() / i)
    }

    /// Kernel spectra for every block at sequence length `len`.
    pub fn kernel_spectra(&self, conv: &FftConvolver<T>) -> Result<Vec<Vec<Vec<Complex<T>>>>> {
        self.blocks
            .iter()
            .map(|b| {
                let k = materialize_kernel(&b.ssm, conv.len())?;
                Ok((0..k.channels).map(|h| conv.spectrum(k.row(h))).collect())
            })
            .collect()
    }

    pub fn forward_conv_traced(&self, u: &[T]) -> Result<ConvTrace<T>> {
        let len = self.check_input(u)?;
        let conv = FftConvolver::new(len);
        let spectra = self.kernel_spectra(&conv)?;
        self.forward_conv_with(u, &conv, &spectra)
    }

    /// Convolution-mode forward with precomputed kernel spectra.
    pub fn forward_conv_with(
        &self,
        u: &[T],
        conv: &FftConvolver<T>,
        spectra: &[Vec<Vec<Complex<T>>>],
    ) -> Result<ConvTrace<T>> {
        let len = self.check_input(u)?;
        if len != conv.len() {
            return shape_err(format!("input length {len} differs from kernel length {}", conv.len()));
        }
        let h = self.config.model_dim;
        let encoded = self.encoder.apply_seq(u, len, false);
        let mut ssm_out = Vec::with_capacity(self.blocks.len());
        let mut mix_out = Vec::with_capacity(self.blocks.len());
        let mut x = &encoded;
        for (b, spec) in self.blocks.iter().zip(spectra) {
            let mut s = vec![T::zero(); h * len];
            for ch in 0..h {
                let span = ch * len..(ch + 1) * len;
                conv.convolve(&spec[ch], &x[span.clone()], &mut s[span.clone()]);
                let bias = b.ssm_bias[ch];
                for v in &mut s[span] {
                    *v = (*v + bias).max(T::zero());
                }
            }
            let z = b.mix.apply_seq(&s, len, true);
            ssm_out.push(s);
            mix_out.push(z);
            x = mix_out.last().expect("just pushed");
        }
        let logits = self.decoder.apply_seq(x, len, false);
        Ok(ConvTrace { encoded, ssm_out, mix_out, logits })
    }

    /// Per-token logits (`num_classes × len`) in convolution mode.
    pub fn forward_conv(&self, u: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_conv_traced(u)?.logits)
    }

    /// Fraction of exact zeros after each ReLU (two per block).
    pub fn activation_sparsity(&self, u: &[T]) -> Result<Vec<f64>> {
        let tr = self.forward_conv_traced(u)?;
        let frac = |v: &[T]| v.iter().filter(|x| **x == T::zero()).count() as f64 / v.len() as f64;
        Ok(tr.ssm_out.iter().zip(&tr.mix_out).flat_map(|(s, z)| [frac(s), frac(z)]).collect())
    }

    pub fn new_context(&self) -> StreamingContext<T> {
        let (h, n) = (self.config.model_dim, self.config.state_dim);
        StreamingContext {
            states: (0..self.blocks.len()).map(|_| SSMState::zeros(h, n)).collect(),
            logit_accumulator: vec![T::zero(); self.config.num_classes],
            last_logits: vec![T::zero(); self.config.num_classes],
            tokens_seen: 0,
            buf_a: vec![T::zero(); h],
            buf_b: vec![T::zero(); h],
        }
    }

    /// Advance `ctx` by one token and return that token's logits.
    pub fn forward_stream(&self, ctx: &mut StreamingContext<T>, token: &[T]) -> Result<Vec<T>> {
        self.forward_stream_observed(ctx, token, &mut |_, _| {})
    }

    /// [`forward_stream`](Self::forward_stream) reporting every intermediate
    /// activation to `tap`; SSM states are passed as interleaved re/im.
    pub fn forward_stream_observed(
        &self,
        ctx: &mut StreamingContext<T>,
        token: &[T],
        tap: &mut dyn FnMut(Tap, &[T]),
    ) -> Result<Vec<T>> {
        if token.len() != self.config.input_dim {
            return shape_err(format!("token has {} features, expected {}", token.len(), self.config.input_dim));
        }
        if ctx.states.len() != self.blocks.len() || ctx.logit_accumulator.len() != self.config.num_classes {
            return shape_err("streaming context belongs to a different network");
        }
        let StreamingContext { states, buf_a, buf_b, .. } = ctx;
        self.encoder.apply_token(token, buf_a, false);
        tap(Tap::Encoded, buf_a);
        for (i, (b, st)) in self.blocks.iter().zip(states.iter_mut()).enumerate() {
            step_in_place(&b.ssm, &mut st.x, buf_a, buf_b);
            tap(Tap::State(i), complex_as_reals(&st.x));
            for (v, bias) in buf_b.iter_mut().zip(&b.ssm_bias) {
                *v = (*v + *bias).max(T::zero());
            }
            tap(Tap::SsmOut(i), buf_b);
            b.mix.apply_token(buf_b, buf_a, true);
            tap(Tap::MixOut(i), buf_a);
        }
        let mut logits = vec![T::zero(); self.config.num_classes];
        self.decoder.apply_token(&ctx.buf_a, &mut logits, false);
        tap(Tap::Logits, &logits);
        for (acc, l) in ctx.logit_accumulator.iter_mut().zip(&logits) {
            *acc = *acc + *l;
        }
        ctx.last_logits.copy_from_slice(&logits);
        ctx.tokens_seen += 1;
        Ok(logits)
    }

    /// Stream a whole channel-major sequence from a fresh context.
    pub fn forward_stream_seq(&self, u: &[T]) -> Result<(StreamingContext<T>, Vec<T>)> {
        let len = self.check_input(u)?;
        let i = self.config.input_dim;
        let c = self.config.num_classes;
        let mut ctx = self.new_context();
        let mut out = vec![T::zero(); c * len];
        let mut tok = vec![T::zero(); i];
        for t in 0..len {
            for (f, v) in tok.iter_mut().enumerate() {
                *v = u[f * len + t];
            }
            let y = self.forward_stream(&mut ctx, &tok)?;
            for (k, v) in y.into_iter().enumerate() {
                out[k * len + t] = v;
            }
        }
        Ok((ctx, out))
    }

    /// Class decision from channel-major per-token logits.
    pub fn decide(&self, logits: &[T]) -> usize {
        let c = self.config.num_classes;
        let len = logits.len() / c;
        let pooled: Vec<T> = (0..c)
            .map(|k| {
                let row = &logits[k * len..(k + 1) * len];
                match self.config.readout {
                    Readout::MeanPool => row.iter().copied().sum::<T>() / T::from(len).unwrap(),
                    Readout::LastToken => row[len - 1],
                }
            })
            .collect();
        argmax(&pooled)
    }

    pub fn classify_conv(&self, u: &[T]) -> Result<usize> {
        Ok(self.decide(&self.forward_conv(u)?))
    }

    pub fn cast<U: Real>(&self) -> DiscreteNetwork<U> {
        DiscreteNetwork {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| DiscreteBlock {
                    ssm: DiscreteSSMParams {
                        channels: b.ssm.channels,
                        state_dim: b.ssm.state_dim,
                        a_bar: cast_complex(&b.ssm.a_bar),
                        b_bar: cast_complex(&b.ssm.b_bar),
                        c_bar: cast_complex(&b.ssm.c_bar),
                    },
                    ssm_bias: cast_slice(&b.ssm_bias),
                    mix: b.mix.cast(),
                })
                .collect(),
            decoder: self.decoder.cast(),
        }
    }
}

/// Intermediate activations exposed by [`DiscreteNetwork::forward_stream_observed`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    Encoded,
    State(usize),
    SsmOut(usize),
    MixOut(usize),
    Logits,
}

/// Per-sequence state for token-by-token inference.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamingContext<T> {
    pub states: Vec<SSMState<T>>,
    pub logit_accumulator: Vec<T>,
    pub last_logits: Vec<T>,
    pub tokens_seen: usize,
    buf_a: Vec<T>,
    buf_b: Vec<T>,
}

impl<T: Real> StreamingContext<T> {
    pub fn reset(&mut self) {
        self.states.iter_mut().for_each(SSMState::reset);
        self.logit_accumulator.iter_mut().for_each(|v| *v = T::zero());
        self.last_logits.iter_mut().for_each(|v| *v = T::zero());
        self.tokens_seen = 0;
        self.buf_a.iter_mut().chain(self.buf_b.iter_mut()).for_each(|v| *v = T::zero());
    }

    /// Decision after the tokens seen so far.
    pub fn classify(&self, readout: Readout) -> Result<usize> {
        if self.tokens_seen == 0 {
            return Err(Error::InvalidParameter("cannot classify before any token".into()));
        }
        Ok(match readout {
            Readout::MeanPool => {
                let n = T::from(self.tokens_seen).unwrap();
                argmax(&self.logit_accumulator.iter().map(|v| *v / n).collect::<Vec<_>>())
            }
            Readout::LastToken => argmax(&self.last_logits),
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
