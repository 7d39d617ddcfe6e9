//! Calibration of the step cost model against measured throughput,
//! latency and energy.
//!
//! Every timing column is linear in the time parameters once throughputs
//! are inverted (seconds per token or per sample), and every energy column
//! is linear in the energy parameters. Each group is fitted by non-negative
//! least squares on relative residuals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NetworkConfig;

use super::cost::{predict, InjectionSchedule, RunMetrics, ScheduleKind, StepCostModel};
use super::placement::{PlacementConfig, Workload};

/// One measured configuration (a row of a results table).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTarget {
    pub dataset: String,
    /// `small` or `large`.
    pub model: String,
    pub input_dim: usize,
    pub seq_len: usize,
    pub schedule: ScheduleKind,
    pub energy_mj_per_token: f64,
    pub latency_ms_per_token: f64,
    pub throughput_tokens_per_s: f64,
    pub edp_uj_s_per_token: f64,
    pub energy_mj_per_sample: f64,
    pub latency_ms_per_sample: f64,
    pub throughput_samples_per_s: f64,
    pub edp_uj_s_per_sample: f64,
}

impl CostTarget {
    pub fn network(&self) -> Result<NetworkConfig> {
        match self.model.as_str() {
            "small" => Ok(NetworkConfig::small(self.input_dim, self.seq_len)),
            "large" => Ok(NetworkConfig::large(self.input_dim, self.seq_len)),
            m => Err(Error::Data(format!("unknown model size {m:?}"))),
        }
    }
}

/// Parse a CSV of targets with a header naming the [`CostTarget`] fields.
pub fn read_targets(csv_text: &str) -> Result<Vec<CostTarget>> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        out.push(rec.map_err(|e| Error::Data(format!("cost target row {}: {e}", i + 1)))?);
    }
    if out.is_empty() {
        return Err(Error::Data("no cost targets".into()));
    }
    Ok(out)
}

/// Metric column, all in SI units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    LatencyPerToken,
    ThroughputTokens,
    LatencyPerSample,
    ThroughputSamples,
    EnergyPerToken,
    EnergyPerSample,
}

impl Column {
    pub const TIMING: [Column; 4] = [Column::LatencyPerToken, Column::ThroughputTokens, Column::LatencyPerSample, Column::ThroughputSamples];
    pub const ENERGY: [Column; 2] = [Column::EnergyPerToken, Column::EnergyPerSample];

    pub fn measured(self, t: &CostTarget) -> f64 {
        match self {
            Column::LatencyPerToken => t.latency_ms_per_token * 1e-3,
            Column::ThroughputTokens => t.throughput_tokens_per_s,
            Column::LatencyPerSample => t.latency_ms_per_sample * 1e-3,
            Column::ThroughputSamples => t.throughput_samples_per_s,
            Column::EnergyPerToken => t.energy_mj_per_token * 1e-3,
            Column::EnergyPerSample => t.energy_mj_per_sample * 1e-3,
        }
    }

    pub fn predicted(self, m: &RunMetrics) -> f64 {
        match self {
            Column::LatencyPerToken => m.latency_per_token,
            Column::ThroughputTokens => m.throughput_tokens,
            Column::LatencyPerSample => m.latency_per_sample,
            Column::ThroughputSamples => m.throughput_samples,
            Column::EnergyPerToken => m.energy_per_token,
            Column::EnergyPerSample => m.energy_per_sample,
        }
    }

    fn is_rate(self) -> bool {
        matches!(self, Column::ThroughputTokens | Column::ThroughputSamples)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResidual {
    pub dataset: String,
    pub schedule: ScheduleKind,
    pub column: Column,
    pub measured: f64,
    pub predicted: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: StepCostModel,
    pub residuals: Vec<FitResidual>,
    pub max_timing_rel_error: f64,
    pub max_energy_rel_error: f64,
}

/// Least squares `min |A x - b|` with `x >= 0`, by exhaustive search over
/// active sets (fine for a handful of unknowns).
pub fn nnls_small(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = a.first().map_or(0, Vec::len);
    if n == 0 || n > 12 || a.len() != b.len() || a.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidParameter("nnls needs a non-empty m x n system with n <= 12".into()));
    }
    let residual = |x: &[f64]| -> f64 {
        a.iter().zip(b).map(|(r, bi)| (r.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() - bi).powi(2)).sum()
    };
    let mut best = (vec![0.0; n], residual(&vec![0.0; n]));
    for mask in 1u32..(1 << n) {
        let cols: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let k = cols.len();
        // normal equations on the free columns, Gaussian elimination with pivoting
        let mut m = vec![vec![0.0; k + 1]; k];
        for (p, &cp) in cols.iter().enumerate() {
            for (q, &cq) in cols.iter().enumerate() {
                m[p][q] = a.iter().map(|r| r[cp] * r[cq]).sum();
            }
            m[p][k] = a.iter().zip(b).map(|(r, bi)| r[cp] * bi).sum();
        }
        let mut ok = true;
        for c in 0..k {
            let piv = (c..k).max_by(|x, y| m[*x][c].abs().total_cmp(&m[*y][c].abs())).unwrap();
            if m[piv][c].abs() < 1e-300 {
                ok = false;
                break;
            }
            m.swap(c, piv);
            for r in 0..k {
                if r != c {
                    let f = m[r][c] / m[c][c];
                    for j in c..=k {
                        m[r][j] -= f * m[c][j];
                    }
                }
            }
        }
        if !ok {
            continue;
        }
        let mut x = vec![0.0; n];
        for (p, &cp) in cols.iter().enumerate() {
            x[cp] = m[p][k] / m[p][p];
        }
        if x.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            continue;
        }
        let r = residual(&x);
        if r < best.1 {
            best = (x, r);
        }
    }
    Ok(best.0)
}

fn basis(len: usize, f: impl Fn(usize) -> StepCostModel) -> Vec<StepCostModel> {
    (0..len).map(f).collect()
}

fn unit_time(j: usize) -> StepCostModel {
    let mut c = StepCostModel::zero();
    match j {
        0 => c.t_step_base = 1.0,
        1 => c.t_per_active_core = 1.0,
        _ => c.t_per_active_stage = 1.0,
    }
    c
}

fn unit_energy(j: usize) -> StepCostModel {
    let mut c = StepCostModel { t_step_base: 1.0, ..StepCostModel::zero() };
    match j {
        0 => c.e_static_per_step = 1.0,
        1 => c.e_per_synop = 1.0,
        _ => c.e_per_neuron_update = 1.0,
    }
    c
}

/// Fit one shared cost model to all targets.
pub fn fit_cost(targets: &[CostTarget], placement: &PlacementConfig) -> Result<FitReport> {
    let cases: Vec<(Workload, usize)> = targets
        .iter()
        .map(|t| {
            let w = Workload::from_config(&t.network()?, placement)?;
            let period = InjectionSchedule::for_depth(t.schedule, w.depth()).period;
            Ok((w, period))
        })
        .collect::<Result<_>>()?;

    // time: rows are seconds-per-item under each unit parameter, over the measured value
    let tb = basis(3, unit_time);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (t, (w, p)) in targets.iter().zip(&cases) {
        let unit: Vec<RunMetrics> = tb.iter().map(|c| predict(w, *p, c)).collect();
        for col in Column::TIMING {
            let y = col.measured(t);
            let (row, target): (Vec<f64>, f64) = if col.is_rate() {
                (unit.iter().map(|m| 1.0 / col.predicted(m)).collect(), 1.0 / y)
            } else {
                (unit.iter().map(|m| col.predicted(m)).collect(), y)
            };
            a.push(row.iter().map(|v| v / target).collect());
            b.push(1.0);
        }
    }
    let th = nnls_small(&a, &b)?;

    let eb = basis(3, unit_energy);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (t, (w, p)) in targets.iter().zip(&cases) {
        let unit: Vec<RunMetrics> = eb.iter().map(|c| predict(w, *p, c)).collect();
        for col in Column::ENERGY {
            let y = col.measured(t);
            a.push(unit.iter().map(|m| col.predicted(m) / y).collect());
            b.push(1.0);
        }
    }
    let en = nnls_small(&a, &b)?;

    let model = StepCostModel {
        t_step_base: th[0],
        t_per_active_core: th[1],
        t_per_active_stage: th[2],
        e_static_per_step: en[0],
        e_per_synop: en[1],
        e_per_neuron_update: en[2],
    };
    let mut residuals = Vec::new();
    for (t, (w, p)) in targets.iter().zip(&cases) {
        let m = predict(w, *p, &model);
        for col in Column::TIMING.into_iter().chain(Column::ENERGY) {
            let (measured, predicted) = (col.measured(t), col.predicted(&m));
            residuals.push(FitResidual {
                dataset: t.dataset.clone(),
                schedule: t.schedule,
                column: col,
                measured,
                predicted,
                rel_error: (predicted - measured).abs() / measured.abs(),
            });
        }
    }
    let max_of = |cols: &[Column]| residuals.iter().filter(|r| cols.contains(&r.column)).map(|r| r.rel_error).fold(0.0, f64::max);
    Ok(FitReport {
        max_timing_rel_error: max_of(&Column::TIMING),
        max_energy_rel_error: max_of(&Column::ENERGY),
        model,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nnls_solves_consistent_systems_and_respects_bounds() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let x = nnls_small(&a, &[2.0, 3.0, 5.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
        let x = nnls_small(&a, &[-2.0, 3.0, 1.0]).unwrap();
        assert_eq!(x[0], 0.0);
        assert!((x[1] - 2.0).abs() < 1e-12);
    }

    fn synth(model: &StepCostModel) -> Vec<CostTarget> {
        let mut v = Vec::new();
        for (ds, size, i, l) in [("smnist", "small", 1, 784), ("scifar", "large", 3, 1024)] {
            for kind in [ScheduleKind::FallThrough, ScheduleKind::Pipelined] {
                let cfg = if size == "small" { NetworkConfig::small(i, l) } else { NetworkConfig::large(i, l) };
                let w = Workload::from_config(&cfg, &PlacementConfig::default()).unwrap();
                let m = predict(&w, InjectionSchedule::for_depth(kind, w.depth()).period, model);
                v.push(CostTarget {
                    dataset: ds.into(),
                    model: size.into(),
                    input_dim: i,
                    seq_len: l,
                    schedule: kind,
                    energy_mj_per_token: m.energy_per_token * 1e3,
                    latency_ms_per_token: m.latency_per_token * 1e3,
                    throughput_tokens_per_s: m.throughput_tokens,
                    edp_uj_s_per_token: m.edp_per_token * 1e6,
                    energy_mj_per_sample: m.energy_per_sample * 1e3,
                    latency_ms_per_sample: m.latency_per_sample * 1e3,
                    throughput_samples_per_s: m.throughput_samples,
                    edp_uj_s_per_sample: m.edp_per_sample * 1e6,
                });
            }
        }
        v
    }

    #[test]
    fn recovers_a_synthetic_model() {
        let truth = StepCostModel {
            t_step_base: 4e-6,
            t_per_active_core: 5e-8,
            t_per_active_stage: 6e-7,
            e_per_synop: 2e-11,
            e_per_neuron_update: 5e-11,
            e_static_per_step: 3e-7,
        };
        let rep = fit_cost(&synth(&truth), &PlacementConfig::default()).unwrap();
        assert!(rep.max_timing_rel_error < 1e-9, "{rep:?}");
        assert!(rep.max_energy_rel_error < 1e-6, "{rep:?}");
        assert!((rep.model.t_per_active_stage / truth.t_per_active_stage - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reads_target_csv() {
        let text = "dataset,model,input_dim,seq_len,schedule,energy_mj_per_token,latency_ms_per_token,throughput_tokens_per_s,edp_uj_s_per_token,energy_mj_per_sample,latency_ms_per_sample,throughput_samples_per_s,edp_uj_s_per_sample\n\
                    smnist,small,1,784,fall_through,0.003,0.068,14705,0.0002,2.678,53.314,19,141.59\n";
        let t = read_targets(text).unwrap();
        assert_eq!(t[0].schedule, ScheduleKind::FallThrough);
        assert!((Column::LatencyPerToken.measured(&t[0]) - 0.068e-3).abs() < 1e-18);
        assert!(read_targets("dataset\n").is_err());
        assert!(read_targets(&text.replace("fall_through", "sideways")).is_err());
    }
}
