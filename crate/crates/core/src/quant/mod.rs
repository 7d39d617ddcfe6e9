//! Fixed-point quantization: floor fake-quantization on a symmetric signed
//! grid, bound selection, quantized descale factors and straight-through
//! gradients.
//!
//! A tensor with bound `x_max` at `b` bits lives on the grid
//! `q · x_max / 2^(b-1)` with `q ∈ [-2^(b-1), 2^(b-1) - 1]`.

mod integer;
mod ptq;

pub use integer::{scaled_sum, scaled_sum2, Descale, IntegerBlock, IntegerLinear, IntegerNetwork, IntegerStream, READOUT_ACC_BITS};
pub use ptq::{
    project_transitions, ptq, ActivationBounds, QBlock, QLinear, QuantizedNetwork, CALIBRATION_HEADROOM, MAX_TRANSITION_MAGNITUDE,
    MIN_CALIBRATION_SAMPLES,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest bound handed out for all-zero tensors.
pub const BOUND_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub spike_bits: u32,
    pub state_bits: u32,
    pub descale_bits: u32,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self { weight_bits: 8, spike_bits: 24, state_bits: 24, descale_bits: 16 }
    }
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("weight_bits", self.weight_bits),
            ("spike_bits", self.spike_bits),
            ("state_bits", self.state_bits),
            ("descale_bits", self.descale_bits),
        ] {
            check_bits(b).map_err(|_| Error::Config(format!("{name} = {b} outside [2, 32]")))?;
        }
        Ok(())
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (2..=32).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("bit width {bits} outside [2, 32]")))
    }
}

/// Signed integer range of a `bits`-wide grid.
pub fn int_range(bits: u32) -> (i64, i64) {
    let half = 1i64 << (bits - 1);
    (-half, half - 1)
}

/// Grid spacing `x_max / 2^(b-1)`.
pub fn grid_step(bits: u32, x_max: f64) -> f64 {
    x_max / (1u64 << (bits - 1)) as f64
}

/// Result of quantizing one value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quantized {
    pub q: i64,
    /// The unclamped integer fell outside the signed range.
    pub saturated: bool,
}

/// `floor(x · 2^(b-1) / x_max)` computed exactly, then clamped to the signed range.
pub fn quantize_int(x: f64, bits: u32, x_max: f64) -> Quantized {
    let (lo, hi) = int_range(bits);
    let t = x * (1u64 << (bits - 1)) as f64;
    let f = t / x_max;
    if x.is_nan() {
        return Quantized { q: 0, saturated: true };
    }
    if f >= hi as f64 + 2.0 {
        return Quantized { q: hi, saturated: true };
    }
    if f < lo as f64 - 2.0 {
        return Quantized { q: lo, saturated: true };
    }
    // `f` is within one unit of the exact quotient; fix it with exact residuals.
    let mut q = f.floor();
    if (-q).mul_add(x_max, t) < 0.0 {
        q -= 1.0;
    } else if (-(q + 1.0)).mul_add(x_max, t) >= 0.0 {
        q += 1.0;
    }
    let q = q as i64;
    if q > hi {
        Quantized { q: hi, saturated: true }
    } else if q < lo {
        Quantized { q: lo, saturated: true }
    } else {
        Quantized { q, saturated: false }
    }
}

/// Grid value `q · x_max / 2^(b-1)`, rounded up to the next representable
/// float when the product is inexact. Rounding up keeps the value inside
/// grid cell `q`, which makes [`fake_quantize_value`] exactly idempotent.
pub fn dequantize(q: i64, bits: u32, x_max: f64) -> f64 {
    let qf = q as f64;
    let mut p = qf * x_max;
    if qf.mul_add(x_max, -p) > 0.0 {
        p = p.next_up();
    }
    p / (1u64 << (bits - 1)) as f64
}

/// `⌊x s⌋ / s` with `s = 2^(b-1) / x_max`, integer clamped to the signed range.
pub fn fake_quantize_value(x: f64, bits: u32, x_max: f64) -> f64 {
    dequantize(quantize_int(x, bits, x_max).q, bits, x_max)
}

pub fn fake_quantize(x: &[f64], bits: u32, x_max: f64) -> Result<Vec<f64>> {
    check_bits(bits)?;
    if !(x_max > 0.0) || !x_max.is_finite() {
        return Err(Error::InvalidParameter(format!("quantization bound {x_max} must be positive")));
    }
    Ok(x.iter().map(|v| fake_quantize_value(*v, bits, x_max)).collect())
}

/// Fake quantization that also reports which entries saturated.
pub fn fake_quantize_masked(x: &[f64], bits: u32, x_max: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    check_bits(bits)?;
    if !(x_max > 0.0) || !x_max.is_finite() {
        return Err(Error::InvalidParameter(format!("quantization bound {x_max} must be positive")));
    }
    Ok(x.iter()
        .map(|v| {
            let r = quantize_int(*v, bits, x_max);
            (dequantize(r.q, bits, x_max), r.saturated)
        })
        .unzip())
}

/// Straight-through gradient: identity, zeroed where the forward saturated.
pub fn ste_gradient(upstream: &[f64], saturated: &[bool]) -> Result<Vec<f64>> {
    if upstream.len() != saturated.len() {
        return Err(Error::Shape(format!("{} gradients for {} masks", upstream.len(), saturated.len())));
    }
    Ok(upstream.iter().zip(saturated).map(|(g, s)| if *s { 0.0 } else { *g }).collect())
}

/// What a tensor holds, which decides how its bound is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    SsmABar,
    SsmBBar,
    SsmC,
    Weight,
    Bias,
    Activation,
}

/// Analytic bound 1 for the transition diagonal, max-abs otherwise (with a
/// floor for all-zero tensors). Activation tensors are expected to be the
/// calibration samples themselves.
pub fn select_bound(role: TensorRole, x: &[f64]) -> f64 {
    match role {
        TensorRole::SsmABar => 1.0,
        _ => x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(BOUND_FLOOR),
    }
}

/// A real tensor stored on a `bits`-wide grid with bound `bound`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTensor {
    pub bits: u32,
    pub bound: f64,
    pub values: Vec<f64>,
}

impl QTensor {
    pub fn quantize(values: &[f64], bits: u32, bound: f64) -> Result<Self> {
        Ok(Self { bits, bound, values: fake_quantize(values, bits, bound)? })
    }

    pub fn from_integers(q: &[i64], bits: u32, bound: f64) -> Result<Self> {
        check_bits(bits)?;
        let (lo, hi) = int_range(bits);
        if let Some(v) = q.iter().find(|v| **v < lo || **v > hi) {
            return Err(Error::GridViolation(format!("integer {v} outside {bits}-bit range")));
        }
        Ok(Self { bits, bound, values: q.iter().map(|v| dequantize(*v, bits, bound)).collect() })
    }

    pub fn step(&self) -> f64 {
        grid_step(self.bits, self.bound)
    }

    /// Integer payload; fails if any value is off the grid.
    pub fn integers(&self) -> Result<Vec<i64>> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let q = quantize_int(*v, self.bits, self.bound);
                if dequantize(q.q, self.bits, self.bound) != *v {
                    return Err(Error::GridViolation(format!(
                        "value {v} at index {i} is not on the {}-bit grid of bound {}",
                        self.bits, self.bound
                    )));
                }
                Ok(q.q)
            })
            .collect()
    }

    pub fn on_grid(&self) -> bool {
        self.integers().is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, Signed};
    use proptest::prelude::*;

    fn rat(x: f64) -> BigRational {
        BigRational::from_float(x).unwrap()
    }

    /// Exact `clamp(⌊x s⌋) / s` as a rational.
    fn oracle(x: f64, bits: u32, x_max: f64) -> BigRational {
        let s = BigRational::from_integer(BigInt::one() << (bits - 1)) / rat(x_max);
        let q = (rat(x) * &s).floor().to_integer();
        let half = BigInt::one() << (bits - 1);
        let q = q.clamp(-half.clone(), half - 1);
        BigRational::from_integer(q) / s
    }

    fn matches_oracle(got: f64, want: &BigRational) -> bool {
        let g = rat(got);
        if g < *want {
            return false;
        }
        let below = got.next_down();
        rat(below) < *want
    }

    #[test]
    fn worked_examples() {
        assert_eq!(fake_quantize_value(0.5, 8, 1.0), 0.5);
        assert_eq!(fake_quantize_value(-0.7, 8, 1.0), -0.703125);
        assert_eq!(fake_quantize_value(1.0, 8, 1.0), 0.9921875);
        assert_eq!(quantize_int(1.0, 8, 1.0), Quantized { q: 127, saturated: true });
        assert_eq!(quantize_int(0.0077, 8, 1.0).q, 0);
        assert_eq!(fake_quantize_value(-5.0, 8, 1.0), -1.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(fake_quantize(&[1.0], 8, 0.0).is_err());
        assert!(fake_quantize(&[1.0], 8, -1.0).is_err());
        assert!(fake_quantize(&[1.0], 1, 1.0).is_err());
        assert!(fake_quantize(&[1.0], 33, 1.0).is_err());
    }

    #[test]
    fn dense_grid_matches_big_integer_oracle() {
        for (bits, x_max) in [(8, 1.0), (8, 0.37), (24, 3.3), (16, 1e-3)] {
            for i in -2000..=2000 {
                let x = i as f64 * x_max / 1500.0 + 1e-7 * x_max;
                let got = fake_quantize_value(x, bits, x_max);
                assert!(matches_oracle(got, &oracle(x, bits, x_max)), "x={x} bits={bits} x_max={x_max}");
            }
        }
    }

    #[test]
    fn bounds_by_role() {
        assert_eq!(select_bound(TensorRole::SsmABar, &[5.0, -7.0]), 1.0);
        assert_eq!(select_bound(TensorRole::Weight, &[-0.3, 0.9, 0.1]), 0.9);
        assert_eq!(select_bound(TensorRole::Weight, &[0.0; 4]), 1e-8);
        assert_eq!(select_bound(TensorRole::Bias, &[-2.0, 1.0]), 2.0);
    }

    #[test]
    fn ste_masks_saturated_entries() {
        let (_, mask) = fake_quantize_masked(&[0.2, 1.0, -1.5, -1.0], 8, 1.0).unwrap();
        assert_eq!(mask, vec![false, true, true, false]);
        assert_eq!(ste_gradient(&[1.0, 2.0, 3.0, 4.0], &mask).unwrap(), vec![1.0, 0.0, 0.0, 4.0]);
        assert!(ste_gradient(&[1.0], &[]).is_err());
    }

    #[test]
    fn ste_matches_dithered_finite_difference() {
        // loss f(v) = sin(3 v) evaluated at the quantized value
        let (bits, x_max) = (8, 1.0);
        let step = grid_step(bits, x_max);
        let f = |v: f64| (3.0 * v).sin();
        for w in [-0.61, -0.2, 0.05, 0.33, 0.7] {
            let (mut fd, mut ste) = (0.0, 0.0);
            let n = 400;
            for k in 0..n {
                let x = w + step * (k as f64 + 0.5) / n as f64;
                let up = f(fake_quantize_value(x + step, bits, x_max));
                let down = f(fake_quantize_value(x - step, bits, x_max));
                fd += (up - down) / (2.0 * step);
                ste += 3.0 * (3.0 * fake_quantize_value(x, bits, x_max)).cos();
            }
            assert!(((fd - ste) / ste).abs() < 0.1, "w={w}: fd {fd} ste {ste}");
        }
    }

    #[test]
    fn qtensor_grid_membership() {
        let t = QTensor::quantize(&[0.5, -0.31, 0.0, 0.99], 8, 1.0).unwrap();
        assert_eq!(t.integers().unwrap(), vec![64, -40, 0, 126]);
        assert!(t.on_grid());
        let off = QTensor { bits: 8, bound: 1.0, values: vec![0.3] };
        assert!(matches!(off.integers(), Err(Error::GridViolation(_))));
        let back = QTensor::from_integers(&t.integers().unwrap(), 8, 1.0).unwrap();
        assert_eq!(back, t);
        assert!(QTensor::from_integers(&[128], 8, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn idempotent(x in -10.0f64..10.0, bits in 2u32..=32, x_max in 1e-6f64..20.0) {
            let once = fake_quantize_value(x, bits, x_max);
            prop_assert_eq!(fake_quantize_value(once, bits, x_max), once);
        }

        #[test]
        fn monotone(x in -3.0f64..3.0, d in 0.0f64..1.0, bits in 2u32..=32, x_max in 1e-3f64..5.0) {
            prop_assert!(fake_quantize_value(x, bits, x_max) <= fake_quantize_value(x + d, bits, x_max));
        }

        #[test]
        fn error_within_one_step(x in -1.0f64..1.0, bits in 2u32..=32, x_max in 1.0f64..4.0) {
            let v = fake_quantize_value(x, bits, x_max);
            prop_assert!(!quantize_int(x, bits, x_max).saturated);
            prop_assert!((x - v).abs() <= grid_step(bits, x_max));
            prop_assert!(v <= x + f64::EPSILON * x_max);
        }

        #[test]
        fn agrees_with_oracle(x in -50.0f64..50.0, bits in 2u32..=32, x_max in 1e-4f64..40.0) {
            let got = fake_quantize_value(x, bits, x_max);
            prop_assert!(matches_oracle(got, &oracle(x, bits, x_max)));
            let q = quantize_int(x, bits, x_max).q;
            let s = BigRational::from_integer(BigInt::one() << (bits - 1)) / rat(x_max);
            let exact_q = (oracle(x, bits, x_max) * s).to_integer();
            prop_assert_eq!(BigInt::from(q), exact_q);
            prop_assert!(!(rat(got) - oracle(x, bits, x_max)).is_negative());
        }
    }
}
