//! Numerics of a single diagonal state-space layer.
//!
//! A layer holds `channels` independent SSMs, each with a diagonal complex
//! state of size `state_dim`. Three equivalent views are provided:
//!
//! * continuous parameters `(a, b, c, dt)` ([`DiagonalSSMParams`]),
//! * the zero-order-hold discretization ([`discretize`]) stepped token by
//!   token ([`recurrent_step`]),
//! * the materialized impulse response ([`materialize_kernel`]) applied as a
//!   causal FFT convolution ([`conv_apply`]).
//!
//! Outputs are read out as `y = 2 Re(c · x)` and there is no feedthrough
//! term. All matrices are stored row-major with the channel index outermost.

use std::sync::Arc;

use num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;

/// `|a|` below this makes the ZOH input matrix `(exp(dt a) - 1) / a` singular.
pub const ZOH_SINGULARITY: f64 = 1e-12;

/// Continuous diagonal SSM parameters for `channels` independent SSMs.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalSSMParams<T> {
    pub channels: usize,
    pub state_dim: usize,
    pub a: Vec<Complex<T>>,
    pub b: Vec<Complex<T>>,
    pub c: Vec<Complex<T>>,
    pub dt: Vec<T>,
}

impl<T: Real> DiagonalSSMParams<T> {
    pub fn new(
        channels: usize,
        state_dim: usize,
        a: Vec<Complex<T>>,
        b: Vec<Complex<T>>,
        c: Vec<Complex<T>>,
        dt: Vec<T>,
    ) -> Result<Self> {
        let p = Self { channels, state_dim, a, b, c, dt };
        p.validate()?;
        Ok(p)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let len = self.channels * self.state_dim;
        if self.a.len() != len || self.b.len() != len || self.c.len() != len {
            return shape_err(format!(
                "a/b/c must have {}x{} entries, got {}/{}/{}",
                self.channels,
                self.state_dim,
                self.a.len(),
                self.b.len(),
                self.c.len()
            ));
        }
        if self.dt.len() != self.channels {
            return shape_err(format!("dt must have {} entries, got {}", self.channels, self.dt.len()));
        }
        Ok(())
    }

    /// Shapes agree, `Re(a) < 0` everywhere and every `dt` is positive.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        if let Some(i) = self.a.iter().position(|a| !(a.re < T::zero())) {
            return Err(Error::InvalidParameter(format!(
                "unstable continuous dynamics: Re(a[{i}]) = {} is not negative",
                self.a[i].re
            )));
        }
        if let Some(h) = self.dt.iter().position(|d| !(*d > T::zero()) || !d.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt[{h}] = {} must be positive", self.dt[h])));
        }
        Ok(())
    }
}

/// Discretized diagonals `(a_bar, b_bar, c_bar)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSSMParams<T> {
    pub channels: usize,
    pub state_dim: usize,
    pub a_bar: Vec<Complex<T>>,
    pub b_bar: Vec<Complex<T>>,
    pub c_bar: Vec<Complex<T>>,
}

impl<T: Real> DiscreteSSMParams<T> {
    pub fn check_shapes(&self) -> Result<()> {
        let len = self.channels * self.state_dim;
        if self.a_bar.len() != len || self.b_bar.len() != len || self.c_bar.len() != len {
            return shape_err(format!("discrete params must have {}x{} entries", self.channels, self.state_dim));
        }
        Ok(())
    }

    pub fn max_abs_a_bar(&self) -> T {
        self.a_bar.iter().fold(T::zero(), |m, z| m.max(z.norm()))
    }
}

/// Latent state `x_k`, one complex vector per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SSMState<T> {
    pub channels: usize,
    pub state_dim: usize,
    pub x: Vec<Complex<T>>,
}

impl<T: Real> SSMState<T> {
    pub fn zeros(channels: usize, state_dim: usize) -> Self {
        Self { channels, state_dim, x: vec![Complex::new(T::zero(), T::zero()); channels * state_dim] }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn reset(&mut self) {
        self.x.iter_mut().for_each(|z| *z = Complex::new(T::zero(), T::zero()));
    }
}

/// Materialized convolution kernel, `channels × len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T> {
    pub channels: usize,
    pub len: usize,
    pub k: Vec<T>,
}

impl<T> Kernel<T> {
    pub fn row(&self, h: usize) -> &[T] {
        &self.k[h * self.len..(h + 1) * self.len]
    }
}

/// `exp(z) - 1` without cancellation for small `|z|`.
pub(crate) fn complex_expm1<T: Real>(z: Complex<T>) -> Complex<T> {
    let half_sin = (z.im / T::lit(2.0)).sin();
    let re = z.re.exp_m1() * z.im.cos() - T::lit(2.0) * half_sin * half_sin;
    let im = z.re.exp() * z.im.sin();
    Complex::new(re, im)
}

/// Zero-order-hold discretization, entrywise:
/// `a_bar = exp(dt a)`, `b_bar = (a_bar - 1) / a * b`, `c_bar = c`.
pub fn discretize<T: Real>(params: &DiagonalSSMParams<T>) -> Result<DiscreteSSMParams<T>> {
    params.validate()?;
    let n = params.state_dim;
    let len = params.channels * n;
    let mut a_bar = Vec::with_capacity(len);
    let mut b_bar = Vec::with_capacity(len);
    for h in 0..params.channels {
        let dt = params.dt[h];
        for i in h * n..(h + 1) * n {
            let a = params.a[i];
            if a.norm().to_f64_lossy() < ZOH_SINGULARITY {
                return Err(Error::InvalidParameter(format!(
                    "|a[{i}]| below {ZOH_SINGULARITY}: zero-order hold is singular"
                )));
            }
            let z = a * dt;
            a_bar.push(z.exp());
            b_bar.push(complex_expm1(z) / a * params.b[i]);
        }
    }
    Ok(DiscreteSSMParams {
        channels: params.channels,
        state_dim: n,
        a_bar,
        b_bar,
        c_bar: params.c.clone(),
    })
}

/// Advance `x` in place by one token and write `y[h] = 2 Re(c_bar[h] · x'[h])`.
pub fn step_in_place<T: Real>(d: &DiscreteSSMParams<T>, x: &mut [Complex<T>], u: &[T], y: &mut [T]) {
    let n = d.state_dim;
    let two = T::lit(2.0);
    for h in 0..d.channels {
        let uh = u[h];
        let mut acc = T::zero();
        for i in h * n..(h + 1) * n {
            let xn = d.a_bar[i] * x[i] + d.b_bar[i] * uh;
            x[i] = xn;
            let c = d.c_bar[i];
            acc = acc + (c.re * xn.re - c.im * xn.im);
        }
        y[h] = two * acc;
    }
}

/// One recurrence step `x' = a_bar ⊙ x + b_bar ⊙ u`, `y = 2 Re(c_bar · x')`.
/// The input state is left untouched.
pub fn recurrent_step<T: Real>(
    d: &DiscreteSSMParams<T>,
    state: &SSMState<T>,
    u: &[T],
) -> Result<(SSMState<T>, Vec<T>)> {
    d.check_shapes()?;
    if state.channels != d.channels || state.state_dim != d.state_dim || state.x.len() != d.a_bar.len() {
        return shape_err(format!(
            "state is {}x{}, params are {}x{}",
            state.channels, state.state_dim, d.channels, d.state_dim
        ));
    }
    if u.len() != d.channels {
        return shape_err(format!("input has {} channels, expected {}", u.len(), d.channels));
    }
    let mut next = state.clone();
    let mut y = vec![T::zero(); d.channels];
    step_in_place(d, &mut next.x, u, &mut y);
    Ok((next, y))
}

/// `k[h, l] = 2 Re(Σ_n c_bar · a_bar^l · b_bar)` for `l < len`, via running powers.
pub fn materialize_kernel<T: Real>(d: &DiscreteSSMParams<T>, len: usize) -> Result<Kernel<T>> {
    d.check_shapes()?;
    if len == 0 {
        return Err(Error::InvalidParameter("kernel length must be at least 1".into()));
    }
    let n = d.state_dim;
    let two = T::lit(2.0);
    let mut k = vec![T::zero(); d.channels * len];
    let mut w = vec![Complex::new(T::zero(), T::zero()); n];
    for h in 0..d.channels {
        let base = h * n;
        for j in 0..n {
            w[j] = d.c_bar[base + j] * d.b_bar[base + j];
        }
        let row = &mut k[h * len..(h + 1) * len];
        for out in row.iter_mut() {
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + w[j].re;
                w[j] = w[j] * d.a_bar[base + j];
            }
            *out = two * acc;
        }
    }
    Ok(Kernel { channels: d.channels, len, k })
}

/// Zero-padded real FFT convolution/correlation of length-`len` signals.
///
/// The transform size is the next power of two `>= 2 len`, which makes the
/// circular products equal to linear (causal) ones on the first `len` taps.
#[derive(Clone)]
pub struct FftConvolver<T: Real> {
    len: usize,
    fft_len: usize,
    r2c: Arc<dyn RealToComplex<T>>,
    c2r: Arc<dyn ComplexToReal<T>>,
}

impl<T: Real> std::fmt::Debug for FftConvolver<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftConvolver").field("len", &self.len).field("fft_len", &self.fft_len).finish()
    }
}

impl<T: Real> FftConvolver<T> {
    pub fn new(len: usize) -> Self {
        let fft_len = (2 * len.max(1)).next_power_of_two();
        let mut planner = RealFftPlanner::<T>::new();
        Self { len, fft_len, r2c: planner.plan_fft_forward(fft_len), c2r: planner.plan_fft_inverse(fft_len) }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn fft_len(&self) -> usize {
        self.fft_len
    }

    pub fn spectrum_len(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Spectrum of `signal` zero-padded to the transform size.
    pub fn forward(&self, signal: &[T], out: &mut [Complex<T>]) {
        debug_assert!(signal.len() <= self.fft_len);
        let mut buf = vec![T::zero(); self.fft_len];
        buf[..signal.len()].copy_from_slice(signal);
        self.r2c.process(&mut buf, out).expect("forward fft buffer sizes");
    }

    pub fn spectrum(&self, signal: &[T]) -> Vec<Complex<T>> {
        let mut out = vec![Complex::new(T::zero(), T::zero()); self.spectrum_len()];
        self.forward(signal, &mut out);
        out
    }

    /// Inverse transform of `spec` (consumed as scratch); writes the first
    /// `out.len()` samples, normalized.
    pub fn inverse(&self, spec: &mut [Complex<T>], out: &mut [T]) {
        let last = spec.len() - 1;
        spec[0].im = T::zero();
        spec[last].im = T::zero();
        let mut buf = vec![T::zero(); self.fft_len];
        self.c2r.process(spec, &mut buf).expect("inverse fft buffer sizes");
        let scale = T::one() / T::from(self.fft_len).unwrap();
        for (o, v) in out.iter_mut().zip(&buf) {
            *o = *v * scale;
        }
    }

    /// Causal convolution `out[t] = Σ_{j<=t} k[j] u[t-j]` given the kernel spectrum.
    pub fn convolve(&self, kernel_spec: &[Complex<T>], u: &[T], out: &mut [T]) {
        let mut spec = self.spectrum(u);
        for (s, k) in spec.iter_mut().zip(kernel_spec) {
            *s = *s * *k;
        }
        self.inverse(&mut spec, out);
    }

    /// Anti-causal correlation `out[t] = Σ_{j>=t} k[j-t] g[j]` given the
    /// spectra of `g` and `k`.
    pub fn correlate_spectra(&self, g_spec: &[Complex<T>], k_spec: &[Complex<T>], out: &mut [T]) {
        let mut spec: Vec<Complex<T>> = g_spec.iter().zip(k_spec).map(|(g, k)| *g * k.conj()).collect();
        self.inverse(&mut spec, out);
    }
}

/// Causal convolution of every channel of `u` (`channels × len`) with the
/// matching kernel row.
pub fn conv_apply<T: Real>(kernel: &Kernel<T>, u: &[T]) -> Result<Vec<T>> {
    if u.len() != kernel.channels * kernel.len {
        return shape_err(format!(
            "input has {} values, kernel expects {}x{}",
            u.len(),
            kernel.channels,
            kernel.len
        ));
    }
    let conv = FftConvolver::new(kernel.len);
    let mut y = vec![T::zero(); u.len()];
    for h in 0..kernel.channels {
        let ks = conv.spectrum(kernel.row(h));
        let span = h * kernel.len..(h + 1) * kernel.len;
        conv.convolve(&ks, &u[span.clone()], &mut y[span]);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    fn scalar(a: Complex<f64>, b: Complex<f64>, dt: f64) -> DiagonalSSMParams<f64> {
        DiagonalSSMParams::new(1, 1, vec![a], vec![b], vec![c(1.0, 0.0)], vec![dt]).unwrap()
    }

    fn random_discrete(rng: &mut ChaCha8Rng, h: usize, n: usize) -> DiscreteSSMParams<f64> {
        let mut p = DiagonalSSMParams {
            channels: h,
            state_dim: n,
            a: vec![],
            b: vec![],
            c: vec![],
            dt: (0..h).map(|_| rng.gen_range(0.01..0.5)).collect(),
        };
        for _ in 0..h * n {
            p.a.push(c(-rng.gen_range(0.05..1.0), rng.gen_range(-4.0..4.0)));
            p.b.push(c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            p.c.push(c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        }
        discretize(&p).unwrap()
    }

    /// Forward-Euler integration of x' = a x + b u over one step with `u` held.
    fn euler(a: Complex<f64>, b: Complex<f64>, x0: Complex<f64>, u: f64, dt: f64, substeps: usize) -> Complex<f64> {
        let h = dt / substeps as f64;
        let mut x = x0;
        for _ in 0..substeps {
            x += (a * x + b * u) * h;
        }
        x
    }

    fn exp_series(z: Complex<f64>) -> Complex<f64> {
        let mut term = c(1.0, 0.0);
        let mut sum = term;
        for k in 1..60 {
            term = term * z / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn discretize_matches_euler_integration() {
        let (a, b, dt) = (c(-1.0, 0.0), c(1.0, 0.0), std::f64::consts::LN_2);
        let d = discretize(&scalar(a, b, dt)).unwrap();
        assert!((d.a_bar[0] - c(0.5, 0.0)).norm() < 1e-12);
        assert!((d.b_bar[0] - c(0.5, 0.0)).norm() < 1e-12);
        let a_euler = euler(a, b, c(1.0, 0.0), 0.0, dt, 100_000);
        let b_euler = euler(a, b, c(0.0, 0.0), 1.0, dt, 100_000);
        assert!((d.a_bar[0] - a_euler).norm() < 1e-5);
        assert!((d.b_bar[0] - b_euler).norm() < 1e-5);
    }

    #[test]
    fn discretize_small_step_limit() {
        let dt = 1e-8;
        let d = discretize(&scalar(c(-1.0, 0.0), c(1.0, 0.0), dt)).unwrap();
        assert!((d.a_bar[0] - c(1.0, 0.0)).norm() < 1e-7);
        assert!((d.b_bar[0] - c(dt, 0.0)).norm() < 1e-7);
    }

    #[test]
    fn discretize_complex_exponential_matches_series() {
        let a = c(-0.5, std::f64::consts::PI);
        let d = discretize(&scalar(a, c(1.0, 0.0), 0.1)).unwrap();
        let want = exp_series(a * 0.1);
        assert!((d.a_bar[0] - want).norm() < 1e-14);
        let polar = c((0.1 * std::f64::consts::PI).cos(), (0.1 * std::f64::consts::PI).sin()) * (-0.05f64).exp();
        assert!((d.a_bar[0] - polar).norm() < 1e-14);
        assert!((d.a_bar[0].norm() - 0.951229424500714).abs() < 1e-12);
    }

    #[test]
    fn discretize_rejects_bad_parameters() {
        let mut p = scalar(c(-1.0, 0.0), c(1.0, 0.0), 0.1);
        p.dt[0] = 0.0;
        assert!(matches!(discretize(&p), Err(Error::InvalidParameter(_))));
        p.dt[0] = -1.0;
        assert!(discretize(&p).is_err());
        let mut p = scalar(c(-1.0, 0.0), c(1.0, 0.0), 0.1);
        p.a[0] = c(-1e-13, 0.0);
        let err = discretize(&p).unwrap_err();
        assert!(err.to_string().contains("singular"), "{err}");
        let mut p = scalar(c(-1.0, 0.0), c(1.0, 0.0), 0.1);
        p.dt.push(0.1);
        assert!(matches!(discretize(&p), Err(Error::Shape(_))));
    }

    #[test]
    fn recurrent_step_zero_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_discrete(&mut rng, 3, 4);
        let s = SSMState::zeros(3, 4);
        let (s2, y) = recurrent_step(&d, &s, &[0.0; 3]).unwrap();
        assert!(s2.x.iter().all(|z| z.norm() == 0.0));
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn recurrent_step_hand_unrolled() {
        let d = DiscreteSSMParams {
            channels: 1,
            state_dim: 1,
            a_bar: vec![c(0.5, 0.0)],
            b_bar: vec![c(1.0, 0.0)],
            c_bar: vec![c(1.0, 0.0)],
        };
        let s0 = SSMState::zeros(1, 1);
        let (s1, y1) = recurrent_step(&d, &s0, &[1.0]).unwrap();
        assert_eq!(s1.x[0], c(1.0, 0.0));
        assert_eq!(y1, vec![2.0]);
        let (s2, y2) = recurrent_step(&d, &s1, &[0.0]).unwrap();
        assert_eq!(s2.x[0], c(0.5, 0.0));
        assert_eq!(y2, vec![1.0]);
        // the input state is untouched
        assert_eq!(s0.x[0], c(0.0, 0.0));
        let k = materialize_kernel(&d, 2).unwrap();
        assert_eq!(k.k, vec![y1[0], y2[0]]);
    }

    #[test]
    fn recurrent_step_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_discrete(&mut rng, 2, 2);
        assert!(recurrent_step(&d, &SSMState::zeros(2, 3), &[0.0; 2]).is_err());
        assert!(recurrent_step(&d, &SSMState::zeros(2, 2), &[0.0; 3]).is_err());
    }

    #[test]
    fn recurrence_matches_convolution_64_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, n, len) = (3, 5, 64);
        let d = random_discrete(&mut rng, h, n);
        let u: Vec<f64> = (0..h * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut state = SSMState::zeros(h, n);
        let mut rec = vec![0.0; h * len];
        for t in 0..len {
            let ut: Vec<f64> = (0..h).map(|c| u[c * len + t]).collect();
            let (s, y) = recurrent_step(&d, &state, &ut).unwrap();
            state = s;
            for c in 0..h {
                rec[c * len + t] = y[c];
            }
        }
        let conv = conv_apply(&materialize_kernel(&d, len).unwrap(), &u).unwrap();
        let err = rec.iter().zip(&conv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "max abs err {err}");
    }

    #[test]
    fn kernel_scalar_geometric() {
        let d = DiscreteSSMParams {
            channels: 1,
            state_dim: 1,
            a_bar: vec![c(0.5, 0.0)],
            b_bar: vec![c(1.0, 0.0)],
            c_bar: vec![c(1.0, 0.0)],
        };
        assert_eq!(materialize_kernel(&d, 3).unwrap().k, vec![2.0, 1.0, 0.5]);
        assert!(materialize_kernel(&d, 0).is_err());
    }

    #[test]
    fn kernel_zero_output_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = random_discrete(&mut rng, 2, 3);
        d.c_bar.iter_mut().for_each(|z| *z = c(0.0, 0.0));
        for len in [1, 7, 33] {
            assert!(materialize_kernel(&d, len).unwrap().k.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn kernel_matches_naive_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_discrete(&mut rng, 4, 6);
        let len = 32;
        let k = materialize_kernel(&d, len).unwrap();
        for h in 0..4 {
            for l in 0..len {
                let mut want = 0.0;
                for j in 0..6 {
                    let i = h * 6 + j;
                    let mut p = c(1.0, 0.0);
                    for _ in 0..l {
                        p *= d.a_bar[i];
                    }
                    want += 2.0 * (d.c_bar[i] * p * d.b_bar[i]).re;
                }
                assert!((k.k[h * len + l] - want).abs() < 1e-6);
            }
        }
    }

    fn direct_conv(k: &[f64], u: &[f64]) -> Vec<f64> {
        (0..u.len()).map(|t| (0..=t).map(|j| k[j] * u[t - j]).sum()).collect()
    }

    #[test]
    fn conv_identity_and_impulse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let len = 17;
        let u: Vec<f64> = (0..2 * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut delta = Kernel { channels: 2, len, k: vec![0.0; 2 * len] };
        delta.k[0] = 1.0;
        delta.k[len] = 1.0;
        let y = conv_apply(&delta, &u).unwrap();
        assert!(y.iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-12));

        let k = Kernel { channels: 2, len, k: u.clone() };
        let mut impulse = vec![0.0; 2 * len];
        impulse[0] = 1.0;
        impulse[len] = 1.0;
        let y = conv_apply(&k, &impulse).unwrap();
        assert!(y.iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(conv_apply(&k, &impulse[1..]).is_err());
    }

    #[test]
    fn conv_matches_direct_l128() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let len = 128;
        let kern: Vec<f64> = (0..3 * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..3 * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = conv_apply(&Kernel { channels: 3, len, k: kern.clone() }, &u).unwrap();
        for h in 0..3 {
            let want = direct_conv(&kern[h * len..(h + 1) * len], &u[h * len..(h + 1) * len]);
            let err = want.iter().zip(&y[h * len..]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-5, "channel {h}: {err}");
        }
    }

    #[test]
    fn correlation_is_adjoint_of_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let len = 40;
        let conv = FftConvolver::<f64>::new(len);
        let k: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; len];
        conv.convolve(&conv.spectrum(&k), &u, &mut y);
        let mut back = vec![0.0; len];
        conv.correlate_spectra(&conv.spectrum(&g), &conv.spectrum(&k), &mut back);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn state_stays_within_stability_bound(seed in any::<u64>(), steps in 1usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_discrete(&mut rng, 2, 4);
            let bound_u = 1.0;
            let max_a = d.max_abs_a_bar();
            let max_b = d.b_bar.iter().fold(0.0f64, |m, z| m.max(z.norm()));
            let limit = bound_u * max_b / (1.0 - max_a);
            let mut s = SSMState::zeros(2, 4);
            for _ in 0..steps {
                let u = [rng.gen_range(-bound_u..bound_u), rng.gen_range(-bound_u..bound_u)];
                s = recurrent_step(&d, &s, &u).unwrap().0;
                prop_assert!(s.is_finite());
                for z in &s.x {
                    prop_assert!(z.norm() <= limit * (1.0 + 1e-12));
                }
            }
        }

        #[test]
        fn first_tap_ignores_a_bar(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_discrete(&mut rng, 2, 3);
            let mut other = d.clone();
            other.a_bar.iter_mut().for_each(|z| *z = c(rng.gen_range(-0.9..0.9), rng.gen_range(-0.3..0.3)));
            let k1 = materialize_kernel(&d, 4).unwrap();
            let k2 = materialize_kernel(&other, 4).unwrap();
            for h in 0..2 {
                let want: f64 = (0..3).map(|j| 2.0 * (d.c_bar[h * 3 + j] * d.b_bar[h * 3 + j]).re).sum();
                prop_assert!((k1.row(h)[0] - want).abs() < 1e-12);
                prop_assert!((k2.row(h)[0] - want).abs() < 1e-12);
            }
        }

        #[test]
        fn discretization_is_first_order_consistent(
            re in 0.05f64..3.0, im in -5.0f64..5.0, bre in -2.0f64..2.0, bim in -2.0f64..2.0,
        ) {
            let a = c(-re, im);
            let b = c(bre, bim);
            for dt in [1e-3, 1e-4, 1e-5] {
                let d = discretize(&scalar(a, b, dt)).unwrap();
                let a_rate = (d.a_bar[0] - c(1.0, 0.0)) / dt;
                let b_rate = d.b_bar[0] / dt;
                // Taylor remainders: |a|^2 dt / 2 * e and |a||b| dt / 2 * e
                prop_assert!((a_rate - a).norm() <= a.norm_sqr() * dt);
                prop_assert!((b_rate - b).norm() <= a.norm() * b.norm() * dt + 1e-9);
            }
        }
    }
}
