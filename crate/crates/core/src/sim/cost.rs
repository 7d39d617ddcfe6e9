//! Step-duration and energy model, injection schedules and derived metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::placement::Workload;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// A new token every time step.
    Pipelined,
    /// A new token once the previous one has left the network.
    FallThrough,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSchedule {
    pub kind: ScheduleKind,
    /// Time steps between injections.
    pub period: usize,
}

impl InjectionSchedule {
    pub fn pipelined() -> Self {
        Self { kind: ScheduleKind::Pipelined, period: 1 }
    }

    pub fn fall_through(depth: usize) -> Self {
        Self { kind: ScheduleKind::FallThrough, period: depth.max(1) }
    }

    pub fn for_depth(kind: ScheduleKind, depth: usize) -> Self {
        match kind {
            ScheduleKind::Pipelined => Self::pipelined(),
            ScheduleKind::FallThrough => Self::fall_through(depth),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::Config("injection period must be at least 1".into()));
        }
        Ok(())
    }
}

/// Time-step duration grows with the number of busy cores and of busy
/// pipeline stages; energy is charged per step, per synaptic event and per
/// neuron update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepCostModel {
    pub t_step_base: f64,
    pub t_per_active_core: f64,
    pub t_per_active_stage: f64,
    pub e_per_synop: f64,
    pub e_per_neuron_update: f64,
    pub e_static_per_step: f64,
}

impl Default for StepCostModel {
    /// Values fitted to the published Loihi 2 measurements (see `fit-cost`).
    fn default() -> Self {
        Self {
            t_step_base: 5.42e-6,
            t_per_active_core: 1.88e-9,
            t_per_active_stage: 6.49e-7,
            e_per_synop: 6.94e-11,
            e_per_neuron_update: 0.0,
            e_static_per_step: 8.42e-8,
        }
    }
}

impl StepCostModel {
    pub fn zero() -> Self {
        Self {
            t_step_base: 0.0,
            t_per_active_core: 0.0,
            t_per_active_stage: 0.0,
            e_per_synop: 0.0,
            e_per_neuron_update: 0.0,
            e_static_per_step: 0.0,
        }
    }

    pub fn time_params(&self) -> [f64; 3] {
        [self.t_step_base, self.t_per_active_core, self.t_per_active_stage]
    }

    pub fn energy_params(&self) -> [f64; 3] {
        [self.e_static_per_step, self.e_per_synop, self.e_per_neuron_update]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.time_params().into_iter().chain(self.energy_params());
        if all.into_iter().any(|v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("cost parameters must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn step_time(&self, active_cores: usize, active_stages: usize) -> f64 {
        self.t_step_base + self.t_per_active_core * active_cores as f64 + self.t_per_active_stage * active_stages as f64
    }

    pub fn step_energy(&self, synops: u64, updates: u64) -> f64 {
        self.e_static_per_step + self.e_per_synop * synops as f64 + self.e_per_neuron_update * updates as f64
    }
}

pub fn compute_edp(energy: f64, latency: f64) -> f64 {
    energy * latency
}

/// Energy, latency, throughput and energy-delay product per token and per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub energy_per_token: f64,
    pub latency_per_token: f64,
    pub throughput_tokens: f64,
    pub edp_per_token: f64,
    pub energy_per_sample: f64,
    pub latency_per_sample: f64,
    pub throughput_samples: f64,
    pub edp_per_sample: f64,
}

impl RunMetrics {
    pub fn mean(all: &[RunMetrics]) -> RunMetrics {
        let n = all.len().max(1) as f64;
        let avg = |f: fn(&RunMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        let energy_per_token = avg(|m| m.energy_per_token);
        let latency_per_token = avg(|m| m.latency_per_token);
        let energy_per_sample = avg(|m| m.energy_per_sample);
        let latency_per_sample = avg(|m| m.latency_per_sample);
        RunMetrics {
            energy_per_token,
            latency_per_token,
            throughput_tokens: avg(|m| m.throughput_tokens),
            edp_per_token: compute_edp(energy_per_token, latency_per_token),
            energy_per_sample,
            latency_per_sample,
            throughput_samples: avg(|m| m.throughput_samples),
            edp_per_sample: compute_edp(energy_per_sample, latency_per_sample),
        }
    }
}

/// Stages busy at step `t` when tokens enter every `period` steps
/// (`tokens` limits the stream; `None` is the steady state).
pub fn active_stages(depth: usize, period: usize, t: usize, tokens: Option<usize>) -> impl Iterator<Item = usize> {
    (0..depth).filter(move |s| {
        t >= *s && (t - s).is_multiple_of(period) && tokens.is_none_or(|n| (t - s) / period < n)
    })
}

/// Closed-form steady-state timing of a schedule: (throughput in tokens/s,
/// latency per token in s).
pub fn steady_state(w: &Workload, period: usize, cost: &StepCostModel) -> (f64, f64) {
    let d = w.depth();
    let step = |t: usize| {
        let (mut cores, mut stages) = (0, 0);
        for s in active_stages(d, period, t + d * period, None) {
            cores += w.stage_cores[s];
            stages += 1;
        }
        cost.step_time(cores, stages)
    };
    let cycle: f64 = (0..period).map(step).sum();
    let latency: f64 = (0..d).map(|s| step(s % period)).sum();
    (1.0 / cycle, latency)
}

/// Exact timing of one sample of `w.seq_len` tokens: (steps, total time,
/// mean token latency).
pub fn sample_timing(w: &Workload, period: usize, cost: &StepCostModel) -> (usize, f64, f64) {
    let (d, l) = (w.depth(), w.seq_len);
    let steps = (l - 1) * period + d;
    let durations: Vec<f64> = (0..steps)
        .map(|t| {
            let (mut cores, mut stages) = (0, 0);
            for s in active_stages(d, period, t, Some(l)) {
                cores += w.stage_cores[s];
                stages += 1;
            }
            cost.step_time(cores, stages)
        })
        .collect();
    let total: f64 = durations.iter().sum();
    let mean_latency = (0..l).map(|k| durations[k * period..k * period + d].iter().sum::<f64>()).sum::<f64>() / l as f64;
    (steps, total, mean_latency)
}

/// Predicted metrics for a workload with dense activity, without running
/// the network.
pub fn predict(w: &Workload, period: usize, cost: &StepCostModel) -> RunMetrics {
    let (steps, time, latency) = sample_timing(w, period, cost);
    let l = w.seq_len as f64;
    let energy = steps as f64 * cost.e_static_per_step
        + l * (w.synops_per_token * cost.e_per_synop + w.updates_per_token * cost.e_per_neuron_update);
    RunMetrics {
        energy_per_token: energy / l,
        latency_per_token: latency,
        throughput_tokens: l / time,
        edp_per_token: compute_edp(energy / l, latency),
        energy_per_sample: energy,
        latency_per_sample: time,
        throughput_samples: 1.0 / time,
        edp_per_sample: compute_edp(energy, time),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn workload() -> Workload {
        Workload { stage_cores: vec![1, 1, 5, 2, 5, 2, 5, 2, 5, 2, 1], seq_len: 784, synops_per_token: 1e4, updates_per_token: 9e3 }
    }

    #[test]
    fn edp_examples() {
        let e = compute_edp(0.003e-3, 0.068e-3);
        assert!((e - 2.04e-10).abs() < 1e-22);
        // in µJ·s, rounded to four decimals as published
        assert_eq!(format!("{:.4}", e * 1e6), "0.0002");
        assert_eq!(compute_edp(0.0, 5.0), 0.0);
        assert_eq!(compute_edp(2.0, 3.0), 6.0);
    }

    #[test]
    fn constant_step_time_laws() {
        let w = workload();
        let cost = StepCostModel { t_step_base: 1e-5, ..StepCostModel::zero() };
        let d = w.depth();
        let (thr_ft, lat_ft) = steady_state(&w, d, &cost);
        let (thr_p, lat_p) = steady_state(&w, 1, &cost);
        assert!((lat_ft - 11.0 * 1e-5).abs() < 1e-15);
        assert!((thr_ft - 1.0 / (11.0 * 1e-5)).abs() < 1e-6);
        assert!((thr_p / thr_ft - d as f64).abs() < 1e-9);
        assert!((lat_p - lat_ft).abs() < 1e-15);
    }

    #[test]
    fn contention_makes_fall_through_faster_per_token() {
        let w = workload();
        let cost = StepCostModel { t_step_base: 1e-6, t_per_active_core: 1e-7, ..StepCostModel::zero() };
        let (thr_ft, lat_ft) = steady_state(&w, w.depth(), &cost);
        let (thr_p, lat_p) = steady_state(&w, 1, &cost);
        assert!(lat_ft < lat_p);
        assert!(thr_p > thr_ft);
        // closed form: fall-through visits each stage alone
        let k = w.core_count() as f64;
        assert!((lat_ft - (11.0 * 1e-6 + k * 1e-7)).abs() < 1e-15);
        assert!((lat_p - 11.0 * (1e-6 + k * 1e-7)).abs() < 1e-15);
    }

    #[test]
    fn sample_accounting() {
        let w = workload();
        let cost = StepCostModel { t_step_base: 2e-6, t_per_active_core: 1e-8, t_per_active_stage: 1e-7, ..StepCostModel::zero() };
        let d = w.depth();
        // fall-through: the sample takes L full traversals
        let ft = predict(&w, d, &cost);
        assert!((ft.latency_per_sample - 784.0 * ft.latency_per_token).abs() < 1e-12);
        // pipelined: L steps plus the drain of the last token
        let p = predict(&w, 1, &cost);
        let (_, step_lat) = steady_state(&w, 1, &cost);
        assert!(p.latency_per_sample < 784.0 * p.latency_per_token);
        assert!(p.latency_per_sample > 783.0 * step_lat / d as f64);
        assert!((p.edp_per_sample - p.energy_per_sample * p.latency_per_sample).abs() < 1e-18);
    }

    #[test]
    fn active_stage_pattern() {
        let v: Vec<usize> = active_stages(4, 1, 5, None).collect();
        assert_eq!(v, vec![0, 1, 2, 3]);
        let v: Vec<usize> = active_stages(4, 4, 6, None).collect();
        assert_eq!(v, vec![2]);
        let v: Vec<usize> = active_stages(4, 1, 5, Some(3)).collect();
        assert_eq!(v, vec![3]);
    }
}
