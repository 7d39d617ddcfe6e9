//! Reverse-mode gradients of the convolution-mode forward pass.
//!
//! Complex parameters receive `∂L/∂Re + i ∂L/∂Im`. With that convention a
//! holomorphic map `q = f(p)` pulls gradients back as `g_p = conj(f'(p)) g_q`.

use num_complex::Complex;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::model::{argmax, DiscreteNetwork, Linear, Network, Readout};
use crate::parallel::{map_range, ExecPolicy};
use crate::scalar::Real;
use crate::ssm::{complex_expm1, FftConvolver};

use super::params::ParamSet;

/// Samples per sequentially-accumulated shard. Shards are reduced in index
/// order, so results do not depend on the execution policy.
pub const SHARD: usize = 4;

/// Mean loss, correct count and averaged gradients over a batch.
#[derive(Clone, Debug)]
pub struct BatchGrads<P> {
    pub loss: f64,
    pub correct: usize,
    pub grads: P,
}

/// Cross-entropy of the pooled logits and its gradient w.r.t. per-token logits.
pub(crate) fn readout_backward<T: Real>(
    logits: &[T],
    classes: usize,
    label: usize,
    readout: Readout,
) -> (f64, usize, Vec<T>) {
    let len = logits.len() / classes;
    let pooled: Vec<f64> = (0..classes)
        .map(|k| {
            let row = &logits[k * len..(k + 1) * len];
            match readout {
                Readout::MeanPool => row.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / len as f64,
                Readout::LastToken => row[len - 1].to_f64_lossy(),
            }
        })
        .collect();
    let m = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = pooled.iter().map(|p| (p - m).exp()).sum();
    let loss = m + z.ln() - pooled[label];
    let mut g = vec![T::zero(); logits.len()];
    for k in 0..classes {
        let gp = (pooled[k] - m).exp() / z - if k == label { 1.0 } else { 0.0 };
        match readout {
            Readout::MeanPool => {
                let v = T::lit(gp / len as f64);
                g[k * len..(k + 1) * len].iter_mut().for_each(|x| *x = v);
            }
            Readout::LastToken => g[k * len + len - 1] = T::lit(gp),
        }
    }
    (loss, argmax(&pooled), g)
}

/// Accumulate the weight/bias gradients of `y = W x + b` (sequences
/// `in × len` → `out × len`) and optionally return `Wᵀ gy`.
pub(crate) fn linear_backward<T: Real>(
    l: &Linear<T>,
    x: &[T],
    gy: &[T],
    len: usize,
    grad: &mut Linear<T>,
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let gy_m = MatRef::row_major(gy, l.out_dim, len);
    gemm(T::one(), gy_m, MatRef::row_major(x, l.in_dim, len).t(), T::one(), &mut grad.weight);
    for (gb, row) in grad.bias.iter_mut().zip(gy.chunks_exact(len)) {
        *gb = *gb + row.iter().copied().sum::<T>();
    }
    want_input_grad.then(|| {
        let mut gx = vec![T::zero(); l.in_dim * len];
        gemm(T::one(), l.weight_mat().t(), gy_m, T::zero(), &mut gx);
        gx
    })
}

/// Zero `g` wherever the ReLU output `y` is not positive.
pub(crate) fn relu_mask<T: Real>(g: &mut [T], y: &[T]) {
    for (gi, yi) in g.iter_mut().zip(y) {
        if *yi <= T::zero() {
            *gi = T::zero();
        }
    }
}

struct Shard<T: Real> {
    loss: f64,
    correct: usize,
    grads: DiscreteNetwork<T>,
    /// Per block: spectra of the kernel gradient, `channels × spectrum_len`.
    kernel_spec: Vec<Vec<Complex<T>>>,
}

impl<T: Real> Shard<T> {
    fn merge(&mut self, o: &Shard<T>) {
        self.loss += o.loss;
        self.correct += o.correct;
        self.grads.add_assign(&o.grads);
        for (a, b) in self.kernel_spec.iter_mut().zip(&o.kernel_spec) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x = *x + *y);
        }
    }
}

fn sample_backward<T: Real>(
    d: &DiscreteNetwork<T>,
    conv: &FftConvolver<T>,
    spectra: &[Vec<Vec<Complex<T>>>],
    u: &[T],
    label: usize,
    acc: &mut Shard<T>,
) -> Result<()> {
    let cfg = &d.config;
    let len = conv.len();
    let h = cfg.model_dim;
    let sl = conv.spectrum_len();
    let tr = d.forward_conv_with(u, conv, spectra)?;
    let (loss, pred, g_logits) = readout_backward(&tr.logits, cfg.num_classes, label, cfg.readout);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    acc.loss += loss;
    acc.correct += usize::from(pred == label);
    let last = tr.mix_out.last().unwrap_or(&tr.encoded);
    let mut gx = linear_backward(&d.decoder, last, &g_logits, len, &mut acc.grads.decoder, true).expect("input grad");
    for i in (0..d.blocks.len()).rev() {
        let b = &d.blocks[i];
        let x_in = if i == 0 { &tr.encoded } else { &tr.mix_out[i - 1] };
        relu_mask(&mut gx, &tr.mix_out[i]);
        let gb = &mut acc.grads.blocks[i];
        let mut gs = linear_backward(&b.mix, &tr.ssm_out[i], &gx, len, &mut gb.mix, true).expect("input grad");
        relu_mask(&mut gs, &tr.ssm_out[i]);
        let mut g_in = vec![T::zero(); h * len];
        for ch in 0..h {
            let span = ch * len..(ch + 1) * len;
            gb.ssm_bias[ch] = gb.ssm_bias[ch] + gs[span.clone()].iter().copied().sum::<T>();
            let g_spec = conv.spectrum(&gs[span.clone()]);
            let x_spec = conv.spectrum(&x_in[span.clone()]);
            let ks = &mut acc.kernel_spec[i][ch * sl..(ch + 1) * sl];
            for ((k, g), x) in ks.iter_mut().zip(&g_spec).zip(&x_spec) {
                *k = *k + *g * x.conj();
            }
            conv.correlate_spectra(&g_spec, &spectra[i][ch], &mut g_in[span]);
        }
        gx = g_in;
    }
    linear_backward(&d.encoder, u, &gx, len, &mut acc.grads.encoder, false);
    Ok(())
}

/// Gradients w.r.t. the discrete diagonals from the kernel gradient `gk`
/// (`channels × len` per block), added into `grads`.
pub(crate) fn kernel_to_discrete<T: Real>(d: &DiscreteNetwork<T>, gk: &[Vec<T>], grads: &mut DiscreteNetwork<T>) {
    let n = d.config.state_dim;
    let two = T::lit(2.0);
    for ((b, g), gk) in d.blocks.iter().zip(grads.blocks.iter_mut()).zip(gk) {
        let len = gk.len() / b.ssm.channels;
        for h in 0..b.ssm.channels {
            let row = &gk[h * len..(h + 1) * len];
            for i in h * n..(h + 1) * n {
                let ab = b.ssm.a_bar[i].conj();
                // sum_l gk_l conj(a)^l and sum_l l gk_l conj(a)^(l-1)
                let mut p = Complex::new(T::one(), T::zero());
                let mut s0 = Complex::new(T::zero(), T::zero());
                let mut s1 = Complex::new(T::zero(), T::zero());
                for (l, gl) in row.iter().enumerate() {
                    if l > 0 {
                        s1 = s1 + p * (*gl * T::from(l).unwrap());
                        p = p * ab;
                    }
                    s0 = s0 + p * *gl;
                }
                let w = b.ssm.c_bar[i] * b.ssm.b_bar[i];
                let gw = s0 * two;
                g.ssm.c_bar[i] = g.ssm.c_bar[i] + b.ssm.b_bar[i].conj() * gw;
                g.ssm.b_bar[i] = g.ssm.b_bar[i] + b.ssm.c_bar[i].conj() * gw;
                g.ssm.a_bar[i] = g.ssm.a_bar[i] + w.conj() * s1 * two;
            }
        }
    }
}

/// Pull discrete-parameter gradients back through the zero-order hold onto
/// the continuous parameters (`c` passes through unchanged).
pub fn chain_to_continuous<T: Real>(net: &Network<T>, dg: &DiscreteNetwork<T>) -> Network<T> {
    let mut out = net.zeroed();
    out.encoder = dg.encoder.clone();
    out.decoder = dg.decoder.clone();
    let n = net.config.state_dim;
    for ((ob, b), g) in out.blocks.iter_mut().zip(&net.blocks).zip(&dg.blocks) {
        ob.mix = g.mix.clone();
        ob.ssm_bias = g.ssm_bias.clone();
        ob.ssm.c = g.ssm.c_bar.clone();
        for h in 0..b.ssm.channels {
            let dt = b.ssm.dt[h];
            let mut g_dt = T::zero();
            for i in h * n..(h + 1) * n {
                let a = b.ssm.a[i];
                let bb = b.ssm.b[i];
                let z = a * dt;
                let ab = z.exp();
                let em1 = complex_expm1(z);
                let (ga, gb) = (g.ssm.a_bar[i], g.ssm.b_bar[i]);
                let d_ab_da = ab * dt;
                let d_bb_da = bb * (ab * z - em1) / (a * a);
                let d_bb_db = em1 / a;
                ob.ssm.a[i] = d_ab_da.conj() * ga + d_bb_da.conj() * gb;
                ob.ssm.b[i] = d_bb_db.conj() * gb;
                g_dt = g_dt + (ga.conj() * a * ab).re + (gb.conj() * ab * bb).re;
            }
            ob.ssm.dt[h] = g_dt;
        }
    }
    out
}

fn check_batch<T>(inputs: &[&[T]], labels: &[usize], classes: usize) -> Result<usize> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return shape_err(format!("{} inputs with {} labels", inputs.len(), labels.len()));
    }
    if let Some(l) = labels.iter().find(|l| **l >= classes) {
        return Err(Error::Data(format!("label {l} outside {classes} classes")));
    }
    let n = inputs[0].len();
    if inputs.iter().any(|u| u.len() != n) {
        return shape_err("batch mixes sequence lengths");
    }
    Ok(n)
}

/// Mean cross-entropy and its gradient w.r.t. the discrete parameters,
/// computed in convolution mode.
pub fn conv_discrete_grads<T: Real>(
    d: &DiscreteNetwork<T>,
    inputs: &[&[T]],
    labels: &[usize],
    policy: ExecPolicy,
) -> Result<BatchGrads<DiscreteNetwork<T>>> {
    let n_in = check_batch(inputs, labels, d.config.num_classes)?;
    let len = n_in / d.config.input_dim;
    let conv = FftConvolver::new(len);
    let spectra = d.kernel_spectra(&conv)?;
    let h = d.config.model_dim;
    let sl = conv.spectrum_len();
    let zero = || Shard {
        loss: 0.0,
        correct: 0,
        grads: d.zeroed(),
        kernel_spec: vec![vec![Complex::new(T::zero(), T::zero()); h * sl]; d.blocks.len()],
    };
    let shards = map_range(policy, inputs.len().div_ceil(SHARD), |s| -> Result<Shard<T>> {
        let mut acc = zero();
        for j in s * SHARD..((s + 1) * SHARD).min(inputs.len()) {
            sample_backward(d, &conv, &spectra, inputs[j], labels[j], &mut acc)?;
        }
        Ok(acc)
    });
    let mut total = zero();
    for s in shards {
        total.merge(&s?);
    }
    let inv = T::one() / T::from(inputs.len()).unwrap();
    let gk: Vec<Vec<T>> = total
        .kernel_spec
        .iter_mut()
        .map(|spec| {
            let mut out = vec![T::zero(); h * len];
            for ch in 0..h {
                conv.inverse(&mut spec[ch * sl..(ch + 1) * sl], &mut out[ch * len..(ch + 1) * len]);
            }
            out
        })
        .collect();
    kernel_to_discrete(d, &gk, &mut total.grads);
    total.grads.scale(inv);
    Ok(BatchGrads { loss: total.loss / inputs.len() as f64, correct: total.correct, grads: total.grads })
}

/// Mean cross-entropy and its gradient w.r.t. every continuous parameter,
/// computed in convolution mode.
pub fn conv_grads<T: Real>(
    net: &Network<T>,
    inputs: &[&[T]],
    labels: &[usize],
    policy: ExecPolicy,
) -> Result<BatchGrads<Network<T>>> {
    let d = net.discretize()?;
    let bg = conv_discrete_grads(&d, inputs, labels, policy)?;
    Ok(BatchGrads { loss: bg.loss, correct: bg.correct, grads: chain_to_continuous(net, &bg.grads) })
}

/// Mean cross-entropy of a batch in convolution mode (no gradients).
pub fn conv_loss<T: Real>(net: &Network<T>, inputs: &[&[T]], labels: &[usize]) -> Result<f64> {
    check_batch(inputs, labels, net.config.num_classes)?;
    let d = net.discretize()?;
    let mut total = 0.0;
    for (u, l) in inputs.iter().zip(labels) {
        let logits = d.forward_conv(u)?;
        total += readout_backward(&logits, net.config.num_classes, *l, net.config.readout).0;
    }
    Ok(total / inputs.len() as f64)
}
