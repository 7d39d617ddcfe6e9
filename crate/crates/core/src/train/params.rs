//! Flat views over network parameters and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::model::{DiscreteNetwork, Linear, Network};
use crate::scalar::{complex_as_reals, complex_as_reals_mut, Real};

/// Parameter groups; decides learning rate and update rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    SsmBias,
    /// Continuous diagonal `a` (interleaved re/im).
    SsmA,
    SsmB,
    SsmC,
    /// Step sizes, optimized in log space.
    SsmDt,
    /// Discretized transition diagonal (interleaved re/im).
    ABar,
    BBar,
}

impl ParamKind {
    pub fn is_ssm_dynamics(self) -> bool {
        matches!(self, ParamKind::SsmA | ParamKind::SsmDt | ParamKind::ABar)
    }
}

/// A fixed, ordered list of parameter tensors.
pub trait ParamSet<T: Real>: Clone {
    fn params(&self) -> Vec<(ParamKind, &[T])>;
    fn params_mut(&mut self) -> Vec<(ParamKind, &mut [T])>;

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for (_, p) in z.params_mut() {
            p.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.params_mut().into_iter().zip(other.params()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x = *x + *y);
        }
    }

    fn scale(&mut self, s: T) {
        for (_, p) in self.params_mut() {
            p.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    fn flat(&self) -> Vec<T> {
        self.params().into_iter().flat_map(|(_, p)| p.iter().copied()).collect()
    }

    fn scalar_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite()))
    }
}

fn linear<T>(l: &Linear<T>) -> [(ParamKind, &[T]); 2] {
    [(ParamKind::Weight, &l.weight[..]), (ParamKind::Bias, &l.bias[..])]
}

fn linear_mut<T>(l: &mut Linear<T>) -> [(ParamKind, &mut [T]); 2] {
    [(ParamKind::Weight, &mut l.weight[..]), (ParamKind::Bias, &mut l.bias[..])]
}

impl<T: Real> ParamSet<T> for Network<T> {
    fn params(&self) -> Vec<(ParamKind, &[T])> {
        let mut v: Vec<(ParamKind, &[T])> = linear(&self.encoder).into();
        for b in &self.blocks {
            v.push((ParamKind::SsmA, complex_as_reals(&b.ssm.a)));
            v.push((ParamKind::SsmB, complex_as_reals(&b.ssm.b)));
            v.push((ParamKind::SsmC, complex_as_reals(&b.ssm.c)));
            v.push((ParamKind::SsmDt, &b.ssm.dt));
            v.push((ParamKind::SsmBias, &b.ssm_bias));
            v.extend(linear(&b.mix));
        }
        v.extend(linear(&self.decoder));
        v
    }

    fn params_mut(&mut self) -> Vec<(ParamKind, &mut [T])> {
        let mut v: Vec<(ParamKind, &mut [T])> = linear_mut(&mut self.encoder).into();
        for b in &mut self.blocks {
            v.push((ParamKind::SsmA, complex_as_reals_mut(&mut b.ssm.a)));
            v.push((ParamKind::SsmB, complex_as_reals_mut(&mut b.ssm.b)));
            v.push((ParamKind::SsmC, complex_as_reals_mut(&mut b.ssm.c)));
            v.push((ParamKind::SsmDt, &mut b.ssm.dt));
            v.push((ParamKind::SsmBias, &mut b.ssm_bias));
            v.extend(linear_mut(&mut b.mix));
        }
        v.extend(linear_mut(&mut self.decoder));
        v
    }
}

impl<T: Real> ParamSet<T> for DiscreteNetwork<T> {
    fn params(&self) -> Vec<(ParamKind, &[T])> {
        let mut v: Vec<(ParamKind, &[T])> = linear(&self.encoder).into();
        for b in &self.blocks {
            v.push((ParamKind::ABar, complex_as_reals(&b.ssm.a_bar)));
            v.push((ParamKind::BBar, complex_as_reals(&b.ssm.b_bar)));
            v.push((ParamKind::SsmC, complex_as_reals(&b.ssm.c_bar)));
            v.push((ParamKind::SsmBias, &b.ssm_bias));
            v.extend(linear(&b.mix));
        }
        v.extend(linear(&self.decoder));
        v
    }

    fn params_mut(&mut self) -> Vec<(ParamKind, &mut [T])> {
        let mut v: Vec<(ParamKind, &mut [T])> = linear_mut(&mut self.encoder).into();
        for b in &mut self.blocks {
            v.push((ParamKind::ABar, complex_as_reals_mut(&mut b.ssm.a_bar)));
            v.push((ParamKind::BBar, complex_as_reals_mut(&mut b.ssm.b_bar)));
            v.push((ParamKind::SsmC, complex_as_reals_mut(&mut b.ssm.c_bar)));
            v.push((ParamKind::SsmBias, &mut b.ssm_bias));
            v.extend(linear_mut(&mut b.mix));
        }
        v.extend(linear_mut(&mut self.decoder));
        v
    }
}

/// Largest real part allowed for the continuous diagonal after an update.
pub const MAX_RE_A: f64 = -1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier on the learning rate of `a`, `dt` and the transition diagonal.
    pub ssm_lr_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, ssm_lr_factor: 0.1 }
    }
}

/// Adam with per-group learning rates. Step sizes move in log space and the
/// real part of `a` is clamped to stay negative.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new<P: ParamSet<T>>(config: AdamConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.params().iter().map(|(_, p)| p.len()).collect();
        Self {
            config,
            m: shapes.iter().map(|n| vec![T::zero(); *n]).collect(),
            v: shapes.iter().map(|n| vec![T::zero(); *n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P) {
        self.t += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let bc1 = T::one() - b1.powi(self.t);
        let bc2 = T::one() - b2.powi(self.t);
        let eps = T::lit(c.eps);
        for (k, ((kind, p), (_, g))) in params.params_mut().into_iter().zip(grads.params()).enumerate() {
            let lr = c.learning_rate * if kind.is_ssm_dynamics() { c.ssm_lr_factor } else { 1.0 };
            let lr = T::lit(lr);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = if kind == ParamKind::SsmDt { g[i] * p[i] } else { g[i] };
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                if lr == T::zero() {
                    continue;
                }
                let delta = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] = if kind == ParamKind::SsmDt { (p[i].ln() - delta).exp() } else { p[i] - delta };
            }
            if kind == ParamKind::SsmA && lr != T::zero() {
                let cap = T::lit(MAX_RE_A);
                p.iter_mut().step_by(2).for_each(|re| *re = re.min(cap));
            }
        }
    }
}
