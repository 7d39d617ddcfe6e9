//! Backpropagation through the unrolled recurrence.
//!
//! Each layer is evaluated over the whole sequence before the next one, so
//! the dense layers run as matrix products while every SSM channel steps
//! through time. The full state trajectory is kept for the backward pass.
//! Optional activation clamps mirror the saturating integer arithmetic of
//! the quantized network; clamped entries pass no gradient.

use crate::error::{Error, Result};
use crate::model::{DiscreteNetwork, Network};
use crate::parallel::{map_range, ExecPolicy};
use crate::quant::ActivationBounds;
use crate::scalar::Real;

use super::conv::{chain_to_continuous, linear_backward, readout_backward, BatchGrads, SHARD};
use super::params::ParamSet;

/// Saturation limits of every activation (and of the SSM state components).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationClamp<T> {
    pub encoded: T,
    pub states: Vec<T>,
    pub ssm_out: Vec<T>,
    pub mix_out: Vec<T>,
    pub logits: T,
}

impl<T: Real> ActivationClamp<T> {
    pub fn from_bounds(b: &ActivationBounds) -> Self {
        let v = |x: &[f64]| x.iter().map(|v| T::lit(*v)).collect();
        Self {
            encoded: T::lit(b.encoded),
            states: v(&b.states),
            ssm_out: v(&b.ssm_out),
            mix_out: v(&b.mix_out),
            logits: T::lit(b.logits),
        }
    }

    pub fn unbounded(blocks: usize) -> Self {
        let inf = T::infinity();
        Self { encoded: inf, states: vec![inf; blocks], ssm_out: vec![inf; blocks], mix_out: vec![inf; blocks], logits: inf }
    }
}

struct Trace<T> {
    encoded: Vec<T>,
    /// Per block, state trajectory laid out `[channel][time][state]`.
    state_re: Vec<Vec<T>>,
    state_im: Vec<Vec<T>>,
    ssm_out: Vec<Vec<T>>,
    mix_out: Vec<Vec<T>>,
    logits: Vec<T>,
}

fn clamp_sym<T: Real>(v: &mut [T], bound: T) {
    for x in v {
        *x = x.max(-bound).min(bound);
    }
}

fn forward<T: Real>(d: &DiscreteNetwork<T>, clamp: &ActivationClamp<T>, u: &[T], keep: bool) -> Trace<T> {
    let cfg = &d.config;
    let (h, n) = (cfg.model_dim, cfg.state_dim);
    let len = u.len() / cfg.input_dim;
    let two = T::lit(2.0);
    let mut encoded = d.encoder.apply_seq(u, len, false);
    clamp_sym(&mut encoded, clamp.encoded);
    let mut tr = Trace {
        encoded,
        state_re: Vec::new(),
        state_im: Vec::new(),
        ssm_out: Vec::new(),
        mix_out: Vec::new(),
        logits: Vec::new(),
    };
    let mut xr = vec![T::zero(); n];
    let mut xi = vec![T::zero(); n];
    for (k, b) in d.blocks.iter().enumerate() {
        let x_in = if k == 0 { &tr.encoded } else { &tr.mix_out[k - 1] };
        let (bx, bs) = (clamp.states[k], clamp.ssm_out[k]);
        let traj_len = if keep { h * len * n } else { 0 };
        let mut tre = vec![T::zero(); traj_len];
        let mut tim = vec![T::zero(); traj_len];
        let mut s = vec![T::zero(); h * len];
        for ch in 0..h {
            let base = ch * n;
            let (ar, ai) = split(&b.ssm.a_bar[base..base + n]);
            let (br, bi) = split(&b.ssm.b_bar[base..base + n]);
            let (cr, ci) = split(&b.ssm.c_bar[base..base + n]);
            xr.iter_mut().chain(xi.iter_mut()).for_each(|v| *v = T::zero());
            for t in 0..len {
                let v = x_in[ch * len + t];
                let mut y = T::zero();
                for j in 0..n {
                    let pr = ar[j] * xr[j] - ai[j] * xi[j] + br[j] * v;
                    let pi = ar[j] * xi[j] + ai[j] * xr[j] + bi[j] * v;
                    xr[j] = pr.max(-bx).min(bx);
                    xi[j] = pi.max(-bx).min(bx);
                    y = y + (cr[j] * xr[j] - ci[j] * xi[j]);
                }
                if keep {
                    let o = (ch * len + t) * n;
                    tre[o..o + n].copy_from_slice(&xr);
                    tim[o..o + n].copy_from_slice(&xi);
                }
                s[ch * len + t] = (two * y + b.ssm_bias[ch]).max(T::zero()).min(bs);
            }
        }
        let mut z = b.mix.apply_seq(&s, len, true);
        z.iter_mut().for_each(|v| *v = v.min(clamp.mix_out[k]));
        tr.state_re.push(tre);
        tr.state_im.push(tim);
        tr.ssm_out.push(s);
        tr.mix_out.push(z);
    }
    let last = tr.mix_out.last().unwrap_or(&tr.encoded);
    let mut logits = d.decoder.apply_seq(last, len, false);
    clamp_sym(&mut logits, clamp.logits);
    tr.logits = logits;
    tr
}

fn split<T: Real>(v: &[num_complex::Complex<T>]) -> (Vec<T>, Vec<T>) {
    (v.iter().map(|z| z.re).collect(), v.iter().map(|z| z.im).collect())
}

/// Pass gradient only where `0 < y < bound`.
fn mask_open<T: Real>(g: &mut [T], y: &[T], bound: T) {
    for (gi, yi) in g.iter_mut().zip(y) {
        if !(*yi > T::zero() && *yi < bound) {
            *gi = T::zero();
        }
    }
}

fn mask_sym<T: Real>(g: &mut [T], y: &[T], bound: T) {
    for (gi, yi) in g.iter_mut().zip(y) {
        if !(yi.abs() < bound) {
            *gi = T::zero();
        }
    }
}

fn sample_backward<T: Real>(
    d: &DiscreteNetwork<T>,
    clamp: &ActivationClamp<T>,
    u: &[T],
    label: usize,
    acc: &mut (f64, usize, DiscreteNetwork<T>),
) -> Result<()> {
    let cfg = &d.config;
    let (h, n) = (cfg.model_dim, cfg.state_dim);
    let len = u.len() / cfg.input_dim;
    let two = T::lit(2.0);
    let tr = forward(d, clamp, u, true);
    let (loss, pred, mut g_logits) = readout_backward(&tr.logits, cfg.num_classes, label, cfg.readout);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    acc.0 += loss;
    acc.1 += usize::from(pred == label);
    let grads = &mut acc.2;
    mask_sym(&mut g_logits, &tr.logits, clamp.logits);
    let last = tr.mix_out.last().unwrap_or(&tr.encoded);
    let mut gx = linear_backward(&d.decoder, last, &g_logits, len, &mut grads.decoder, true).expect("input grad");
    let mut lr = vec![T::zero(); n];
    let mut li = vec![T::zero(); n];
    for k in (0..d.blocks.len()).rev() {
        let b = &d.blocks[k];
        let gb = &mut grads.blocks[k];
        let x_in = if k == 0 { &tr.encoded } else { &tr.mix_out[k - 1] };
        mask_open(&mut gx, &tr.mix_out[k], clamp.mix_out[k]);
        let mut gs = linear_backward(&b.mix, &tr.ssm_out[k], &gx, len, &mut gb.mix, true).expect("input grad");
        mask_open(&mut gs, &tr.ssm_out[k], clamp.ssm_out[k]);
        let bx = clamp.states[k];
        let (tre, tim) = (&tr.state_re[k], &tr.state_im[k]);
        let mut g_in = vec![T::zero(); h * len];
        for ch in 0..h {
            let base = ch * n;
            let (ar, ai) = split(&b.ssm.a_bar[base..base + n]);
            let (br, bi) = split(&b.ssm.b_bar[base..base + n]);
            let (cr, ci) = split(&b.ssm.c_bar[base..base + n]);
            let mut ga = vec![T::zero(); 2 * n];
            let mut gbb = vec![T::zero(); 2 * n];
            let mut gc = vec![T::zero(); 2 * n];
            lr.iter_mut().chain(li.iter_mut()).for_each(|v| *v = T::zero());
            let mut g_bias = T::zero();
            for t in (0..len).rev() {
                let gy = gs[ch * len + t];
                g_bias = g_bias + gy;
                let v = x_in[ch * len + t];
                let o = (ch * len + t) * n;
                let mut gv = T::zero();
                for j in 0..n {
                    let (xr, xi) = (tre[o + j], tim[o + j]);
                    let (pr, pi) = if t > 0 { (tre[o - n + j], tim[o - n + j]) } else { (T::zero(), T::zero()) };
                    gc[2 * j] = gc[2 * j] + two * gy * xr;
                    gc[2 * j + 1] = gc[2 * j + 1] - two * gy * xi;
                    let mut r = lr[j] + two * cr[j] * gy;
                    let mut i = li[j] - two * ci[j] * gy;
                    if !(xr.abs() < bx) {
                        r = T::zero();
                    }
                    if !(xi.abs() < bx) {
                        i = T::zero();
                    }
                    ga[2 * j] = ga[2 * j] + pr * r + pi * i;
                    ga[2 * j + 1] = ga[2 * j + 1] + pr * i - pi * r;
                    gbb[2 * j] = gbb[2 * j] + v * r;
                    gbb[2 * j + 1] = gbb[2 * j + 1] + v * i;
                    gv = gv + br[j] * r + bi[j] * i;
                    lr[j] = ar[j] * r + ai[j] * i;
                    li[j] = ar[j] * i - ai[j] * r;
                }
                g_in[ch * len + t] = gv;
            }
            gb.ssm_bias[ch] = gb.ssm_bias[ch] + g_bias;
            for j in 0..n {
                let gi = base + j;
                gb.ssm.a_bar[gi].re = gb.ssm.a_bar[gi].re + ga[2 * j];
                gb.ssm.a_bar[gi].im = gb.ssm.a_bar[gi].im + ga[2 * j + 1];
                gb.ssm.b_bar[gi].re = gb.ssm.b_bar[gi].re + gbb[2 * j];
                gb.ssm.b_bar[gi].im = gb.ssm.b_bar[gi].im + gbb[2 * j + 1];
                gb.ssm.c_bar[gi].re = gb.ssm.c_bar[gi].re + gc[2 * j];
                gb.ssm.c_bar[gi].im = gb.ssm.c_bar[gi].im + gc[2 * j + 1];
            }
        }
        gx = g_in;
    }
    mask_sym(&mut gx, &tr.encoded, clamp.encoded);
    linear_backward(&d.encoder, u, &gx, len, &mut grads.encoder, false);
    Ok(())
}

/// Per-token logits (`num_classes × len`) of the recurrent forward with clamps.
pub fn recurrent_logits<T: Real>(d: &DiscreteNetwork<T>, clamp: &ActivationClamp<T>, u: &[T]) -> Vec<T> {
    forward(d, clamp, u, false).logits
}

/// Mean cross-entropy and gradients w.r.t. the discrete parameters by
/// backpropagation through time.
pub fn recurrent_discrete_grads<T: Real>(
    d: &DiscreteNetwork<T>,
    clamp: &ActivationClamp<T>,
    inputs: &[&[T]],
    labels: &[usize],
    policy: ExecPolicy,
) -> Result<BatchGrads<DiscreteNetwork<T>>> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::Shape(format!("{} inputs with {} labels", inputs.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|l| **l >= d.config.num_classes) {
        return Err(Error::Data(format!("label {l} outside {} classes", d.config.num_classes)));
    }
    if inputs.iter().any(|u| u.is_empty() || u.len() % d.config.input_dim != 0) {
        return Err(Error::Shape("input is not input_dim x L".into()));
    }
    let shards = map_range(policy, inputs.len().div_ceil(SHARD), |s| -> Result<(f64, usize, DiscreteNetwork<T>)> {
        let mut acc = (0.0, 0, d.zeroed());
        for j in s * SHARD..((s + 1) * SHARD).min(inputs.len()) {
            sample_backward(d, clamp, inputs[j], labels[j], &mut acc)?;
        }
        Ok(acc)
    });
    let mut total = (0.0, 0, d.zeroed());
    for s in shards {
        let s = s?;
        total.0 += s.0;
        total.1 += s.1;
        total.2.add_assign(&s.2);
    }
    total.2.scale(T::one() / T::from(inputs.len()).unwrap());
    Ok(BatchGrads { loss: total.0 / inputs.len() as f64, correct: total.1, grads: total.2 })
}

/// Float recurrent-mode gradients w.r.t. the continuous parameters.
pub fn recurrent_grads<T: Real>(
    net: &Network<T>,
    inputs: &[&[T]],
    labels: &[usize],
    policy: ExecPolicy,
) -> Result<BatchGrads<Network<T>>> {
    let d = net.discretize()?;
    let clamp = ActivationClamp::unbounded(d.blocks.len());
    let bg = recurrent_discrete_grads(&d, &clamp, inputs, labels, policy)?;
    Ok(BatchGrads { loss: bg.loss, correct: bg.correct, grads: chain_to_continuous(net, &bg.grads) })
}

/// Mean cross-entropy in recurrent mode with clamps (no gradients).
pub fn recurrent_loss<T: Real>(d: &DiscreteNetwork<T>, clamp: &ActivationClamp<T>, inputs: &[&[T]], labels: &[usize]) -> f64 {
    let c = d.config.num_classes;
    inputs
        .iter()
        .zip(labels)
        .map(|(u, l)| readout_backward(&recurrent_logits(d, clamp, u), c, *l, d.config.readout).0)
        .sum::<f64>()
        / inputs.len() as f64
}
