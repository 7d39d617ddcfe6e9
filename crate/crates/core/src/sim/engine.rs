//! Lock-step execution of a core graph.
//!
//! At every time step each busy core consumes the graded spikes its stage's
//! predecessor emitted in the previous step, accumulates them through its
//! synapses, updates its neurons in integer arithmetic and emits new spikes.
//! Cores own disjoint state, so they may run in any order or in parallel.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{argmax, Readout};
use crate::parallel::{for_each_mut, map_slice, ExecPolicy};
use crate::quant::{int_range, IntegerBlock, IntegerLinear};

use super::cost::{compute_edp, InjectionSchedule, RunMetrics, ScheduleKind, StepCostModel};
use super::placement::{CoreGraph, StageKind};

/// Event and activity totals of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u64,
    pub synops: u64,
    pub neuron_updates: u64,
    /// Sum over steps of busy cores.
    pub core_steps: u64,
    pub max_active_cores: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    /// Integer logits, token-major (`len × num_classes`).
    pub logits: Vec<i64>,
    /// Class decided after every token (running readout).
    pub predictions: Vec<usize>,
    pub counters: Counters,
    pub metrics: RunMetrics,
}

impl SimOutput {
    pub fn prediction(&self) -> usize {
        *self.predictions.last().expect("at least one token")
    }
}

struct CoreRuntime {
    stage: usize,
    lo: usize,
    hi: usize,
    /// For each input index, synapses onto this core with a nonzero weight.
    fanout: Vec<u32>,
    state_re: Vec<i64>,
    state_im: Vec<i64>,
    out: Vec<i64>,
    synops: u64,
    updates: u64,
}

fn linear_fanout(l: &IntegerLinear, lo: usize, hi: usize) -> Vec<u32> {
    (0..l.in_dim)
        .map(|j| (lo..hi).filter(|o| l.weight[o * l.in_dim + j] != 0).count() as u32)
        .collect()
}

fn ssm_fanout(b: &IntegerBlock, lo: usize, hi: usize) -> Vec<u32> {
    let n = b.state_dim;
    (0..b.channels)
        .map(|h| if (lo..hi).contains(&h) { (h * n..(h + 1) * n).filter(|i| b.b_re[*i] != 0 || b.b_im[*i] != 0).count() as u32 } else { 0 })
        .collect()
}

impl CoreRuntime {
    fn count_inputs(&mut self, input: &[i64]) {
        self.synops += input.iter().zip(&self.fanout).filter(|(v, _)| **v != 0).map(|(_, f)| *f as u64).sum::<u64>();
    }

    fn run_linear(&mut self, l: &IntegerLinear, input: &[i64]) {
        self.count_inputs(input);
        for (k, o) in (self.lo..self.hi).enumerate() {
            let row = &l.weight[o * l.in_dim..(o + 1) * l.in_dim];
            let acc: i64 = row.iter().zip(input).map(|(w, v)| w * v).sum();
            self.out[k] = l.neuron(o, acc);
        }
        self.updates += (self.hi - self.lo) as u64;
    }

    fn run_ssm(&mut self, b: &IntegerBlock, input: &[i64]) {
        self.count_inputs(input);
        let n = b.state_dim;
        for (k, h) in (self.lo..self.hi).enumerate() {
            let mut acc: i128 = 0;
            for j in 0..n {
                let (i, s) = (h * n + j, k * n + j);
                b.state_update(i, &mut self.state_re[s], &mut self.state_im[s], input[h]);
                let term = b.readout_term(i, self.state_re[s], self.state_im[s]);
                // dendritic event from state neuron to readout neuron
                self.synops += u64::from(term != 0);
                acc += term as i128;
            }
            self.out[k] = b.readout(h, acc);
        }
        self.updates += ((self.hi - self.lo) * (n + 1)) as u64;
    }
}

/// Execute a token-major integer stream (`len × input_dim`) on the core graph.
pub fn run(cg: &CoreGraph, tokens: &[i64], sched: &InjectionSchedule, cost: &StepCostModel, policy: ExecPolicy) -> Result<SimOutput> {
    sched.validate()?;
    cost.validate()?;
    let net = &cg.network;
    let (i_dim, classes) = (net.config.input_dim, net.config.num_classes);
    if tokens.is_empty() || !tokens.len().is_multiple_of(i_dim) {
        return shape_err(format!("token stream of {} values is not len x {i_dim}", tokens.len()));
    }
    let (lo, hi) = int_range(net.spec.spike_bits);
    if tokens.iter().any(|v| *v < lo || *v > hi) {
        return Err(Error::GridViolation("token outside the spike range".into()));
    }
    let len = tokens.len() / i_dim;
    let depth = cg.depth();
    let period = sched.period;

    let mut cores: Vec<CoreRuntime> = cg
        .cores
        .iter()
        .map(|c| {
            let (lo, hi) = (c.units.start, c.units.end);
            let (fanout, states) = match cg.stages[c.stage].kind {
                StageKind::Input => (Vec::new(), 0),
                StageKind::Encoder => (linear_fanout(&net.encoder, lo, hi), 0),
                StageKind::Ssm(b) => (ssm_fanout(&net.blocks[b], lo, hi), (hi - lo) * net.blocks[b].state_dim),
                StageKind::Mix(b) => (linear_fanout(&net.blocks[b].mix, lo, hi), 0),
                StageKind::Decoder => (linear_fanout(&net.decoder, lo, hi), 0),
            };
            CoreRuntime {
                stage: c.stage,
                lo,
                hi,
                fanout,
                state_re: vec![0; states],
                state_im: vec![0; states],
                out: vec![0; hi - lo],
                synops: 0,
                updates: 0,
            }
        })
        .collect();

    // inbox[s]: spikes entering stage s this step (stage 0 reads the sequence)
    let mut inbox: Vec<Option<Vec<i64>>> = vec![None; depth];
    let mut logits = Vec::with_capacity(len * classes);
    let mut predictions = Vec::with_capacity(len);
    let mut pooled = vec![0i64; classes];
    let mut counters = Counters::default();
    let (mut time, mut energy) = (0.0f64, 0.0f64);
    let mut injected_at = Vec::with_capacity(len);
    let mut finished_at = Vec::with_capacity(len);
    let mut step_end = Vec::new();
    let mut next_token = 0;
    let mut t = 0usize;
    while finished_at.len() < len {
        if next_token < len && t.is_multiple_of(period) {
            inbox[0] = Some(tokens[next_token * i_dim..(next_token + 1) * i_dim].to_vec());
            injected_at.push(t);
            next_token += 1;
        }
        let active: Vec<bool> = inbox.iter().map(Option::is_some).collect();
        for_each_mut(policy, &mut cores, |_, c| {
            let Some(input) = inbox[c.stage].as_deref() else { return };
            match cg.stages[c.stage].kind {
                StageKind::Input => {
                    c.out.copy_from_slice(&input[c.lo..c.hi]);
                    c.updates += (c.hi - c.lo) as u64;
                }
                StageKind::Encoder => c.run_linear(&net.encoder, input),
                StageKind::Ssm(b) => c.run_ssm(&net.blocks[b], input),
                StageKind::Mix(b) => c.run_linear(&net.blocks[b].mix, input),
                StageKind::Decoder => c.run_linear(&net.decoder, input),
            }
        });
        let (mut busy_cores, mut busy_stages, mut synops, mut updates) = (0usize, 0usize, 0u64, 0u64);
        let mut next: Vec<Option<Vec<i64>>> = vec![None; depth];
        for (s, st) in cg.stages.iter().enumerate() {
            if !active[s] {
                continue;
            }
            busy_stages += 1;
            busy_cores += st.cores.len();
            let mut out = Vec::with_capacity(st.units);
            for c in &mut cores[st.cores.clone()] {
                out.extend_from_slice(&c.out);
                synops += std::mem::take(&mut c.synops);
                updates += std::mem::take(&mut c.updates);
            }
            if s + 1 < depth {
                next[s + 1] = Some(out);
            } else {
                for (p, v) in pooled.iter_mut().zip(&out) {
                    *p += *v;
                }
                predictions.push(match net.config.readout {
                    Readout::MeanPool => argmax(&pooled),
                    Readout::LastToken => argmax(&out),
                });
                logits.extend_from_slice(&out);
                finished_at.push(t);
            }
        }
        inbox = next;
        time += cost.step_time(busy_cores, busy_stages);
        energy += cost.step_energy(synops, updates);
        step_end.push(time);
        counters.steps += 1;
        counters.synops += synops;
        counters.neuron_updates += updates;
        counters.core_steps += busy_cores as u64;
        counters.max_active_cores = counters.max_active_cores.max(busy_cores as u64);
        t += 1;
    }
    let start_of = |step: usize| if step == 0 { 0.0 } else { step_end[step - 1] };
    let latency = injected_at.iter().zip(&finished_at).map(|(a, b)| step_end[*b] - start_of(*a)).sum::<f64>() / len as f64;
    let l = len as f64;
    let metrics = RunMetrics {
        energy_per_token: energy / l,
        latency_per_token: latency,
        throughput_tokens: if time > 0.0 { l / time } else { f64::INFINITY },
        edp_per_token: compute_edp(energy / l, latency),
        energy_per_sample: energy,
        latency_per_sample: time,
        throughput_samples: if time > 0.0 { 1.0 / time } else { f64::INFINITY },
        edp_per_sample: compute_edp(energy, time),
    };
    Ok(SimOutput { logits, predictions, counters, metrics })
}

/// Averaged metrics of one schedule over several samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub schedule: ScheduleKind,
    pub period: usize,
    pub samples: usize,
    pub correct: usize,
    pub metrics: RunMetrics,
    pub counters: Counters,
}

/// Run every sample under both schedules. Samples run in parallel; each
/// run is sequential inside.
pub fn benchmark_regimes(
    cg: &CoreGraph,
    samples: &[(Vec<i64>, usize)],
    cost: &StepCostModel,
    policy: ExecPolicy,
) -> Result<Vec<RegimeReport>> {
    let mut rows = Vec::new();
    for kind in [ScheduleKind::FallThrough, ScheduleKind::Pipelined] {
        let sched = InjectionSchedule::for_depth(kind, cg.depth());
        let outs = map_slice(policy, samples, |(tokens, _)| run(cg, tokens, &sched, cost, ExecPolicy::Sequential));
        let mut metrics = Vec::with_capacity(samples.len());
        let mut counters = Counters::default();
        let mut correct = 0;
        for (o, (_, label)) in outs.into_iter().zip(samples) {
            let o = o?;
            correct += usize::from(o.prediction() == *label);
            metrics.push(o.metrics);
            counters.steps += o.counters.steps;
            counters.synops += o.counters.synops;
            counters.neuron_updates += o.counters.neuron_updates;
            counters.core_steps += o.counters.core_steps;
            counters.max_active_cores = counters.max_active_cores.max(o.counters.max_active_cores);
        }
        rows.push(RegimeReport { schedule: kind, period: sched.period, samples: samples.len(), correct, metrics: RunMetrics::mean(&metrics), counters });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Network, NetworkConfig};
    use crate::quant::{ptq, IntegerNetwork, QuantSpec};
    use crate::sim::cost::{predict, steady_state};
    use crate::sim::placement::{build_core_graph, PlacementConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph(seed: u64, h: usize, n: usize, blocks: usize, readout: Readout) -> (CoreGraph, Vec<Vec<f64>>) {
        let mut cfg = NetworkConfig::tiny(2, h, n, blocks, 5, 32);
        cfg.readout = readout;
        let net = Network::<f64>::init(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = (0..6).map(|_| (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let q = ptq(&net, &QuantSpec::default(), &data, ExecPolicy::Sequential).unwrap();
        let inet = IntegerNetwork::extract(&q).unwrap();
        let p = PlacementConfig { target_work_per_core: 40, ..Default::default() };
        (build_core_graph(&inet, &p).unwrap(), data)
    }

    #[test]
    fn simulator_matches_the_integer_reference_bit_for_bit() {
        for readout in [Readout::MeanPool, Readout::LastToken] {
            let (cg, data) = graph(1, 6, 4, 2, readout);
            assert!(cg.core_count() > cg.depth(), "stages should span several cores");
            for u in &data {
                let tokens = cg.network.quantize_tokens(u).unwrap();
                let (stream, reference) = cg.network.run_sequence(&tokens).unwrap();
                for sched in [InjectionSchedule::pipelined(), InjectionSchedule::fall_through(cg.depth()), InjectionSchedule { kind: ScheduleKind::Pipelined, period: 3 }] {
                    for policy in [ExecPolicy::Sequential, ExecPolicy::Parallel] {
                        let out = run(&cg, &tokens, &sched, &StepCostModel::default(), policy).unwrap();
                        assert_eq!(out.logits, reference);
                        assert_eq!(out.prediction(), cg.network.classify_stream(&stream).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn measured_timing_matches_closed_form() {
        let (cg, data) = graph(2, 6, 4, 2, Readout::MeanPool);
        let tokens = cg.network.quantize_tokens(&data[0]).unwrap();
        let cost = StepCostModel { t_step_base: 1e-6, t_per_active_core: 2e-7, t_per_active_stage: 3e-7, ..StepCostModel::zero() };
        let w = cg.workload(32);
        for sched in [InjectionSchedule::pipelined(), InjectionSchedule::fall_through(cg.depth())] {
            let out = run(&cg, &tokens, &sched, &cost, ExecPolicy::Sequential).unwrap();
            let want = predict(&w, sched.period, &cost);
            assert!((out.metrics.latency_per_sample - want.latency_per_sample).abs() < 1e-12);
            assert!((out.metrics.latency_per_token - want.latency_per_token).abs() < 1e-12);
            assert_eq!(out.counters.steps as usize, 31 * sched.period + cg.depth());
        }
        let ft = run(&cg, &tokens, &InjectionSchedule::fall_through(cg.depth()), &cost, ExecPolicy::Sequential).unwrap();
        let (_, lat) = steady_state(&w, cg.depth(), &cost);
        assert!((ft.metrics.latency_per_token - lat).abs() < 1e-12);
        assert_eq!(ft.counters.max_active_cores as usize, cg.max_stage_cores());
    }

    #[test]
    fn zero_cost_model_gives_zero_energy_and_same_outputs() {
        let (cg, data) = graph(3, 4, 4, 1, Readout::MeanPool);
        let tokens = cg.network.quantize_tokens(&data[1]).unwrap();
        let out = run(&cg, &tokens, &InjectionSchedule::pipelined(), &StepCostModel::zero(), ExecPolicy::Sequential).unwrap();
        assert_eq!(out.metrics.energy_per_token, 0.0);
        assert_eq!(out.metrics.edp_per_token, 0.0);
        assert_eq!(out.logits, cg.network.run_sequence(&tokens).unwrap().1);
    }

    #[test]
    fn energy_is_additive_and_schedule_invariant_without_static_cost() {
        let (cg, data) = graph(4, 6, 4, 2, Readout::MeanPool);
        let tokens = cg.network.quantize_tokens(&data[2]).unwrap();
        let cost = StepCostModel { e_per_synop: 1e-9, e_per_neuron_update: 3e-9, ..StepCostModel::zero() };
        let a = run(&cg, &tokens, &InjectionSchedule::pipelined(), &cost, ExecPolicy::Sequential).unwrap();
        let b = run(&cg, &tokens, &InjectionSchedule::fall_through(cg.depth()), &cost, ExecPolicy::Sequential).unwrap();
        assert_eq!(a.counters.synops, b.counters.synops);
        assert_eq!(a.counters.neuron_updates, b.counters.neuron_updates);
        let total = a.counters.synops as f64 * 1e-9 + a.counters.neuron_updates as f64 * 3e-9;
        assert!((a.metrics.energy_per_sample - total).abs() < 1e-15);
        assert!((a.metrics.energy_per_sample - b.metrics.energy_per_sample).abs() < 1e-15);
        assert_eq!(a.counters.neuron_updates, 32 * cg.updates_per_token());
    }

    #[test]
    fn silent_inputs_send_fewer_events() {
        let (cg, data) = graph(5, 6, 4, 2, Readout::MeanPool);
        let tokens = cg.network.quantize_tokens(&data[3]).unwrap();
        let mut quiet = tokens.clone();
        quiet[10..40].iter_mut().for_each(|v| *v = 0);
        let cost = StepCostModel::zero();
        let a = run(&cg, &tokens, &InjectionSchedule::pipelined(), &cost, ExecPolicy::Sequential).unwrap();
        let b = run(&cg, &quiet, &InjectionSchedule::pipelined(), &cost, ExecPolicy::Sequential).unwrap();
        assert!(b.counters.synops < a.counters.synops);
    }

    #[test]
    fn rejects_bad_streams() {
        let (cg, _) = graph(6, 4, 4, 1, Readout::MeanPool);
        let c = StepCostModel::zero();
        let s = InjectionSchedule::pipelined();
        assert!(matches!(run(&cg, &[1, 2, 3], &s, &c, ExecPolicy::Sequential), Err(Error::Shape(_))));
        assert!(matches!(run(&cg, &[1 << 40, 0], &s, &c, ExecPolicy::Sequential), Err(Error::GridViolation(_))));
        let bad = InjectionSchedule { kind: ScheduleKind::Pipelined, period: 0 };
        assert!(run(&cg, &[0, 0], &bad, &c, ExecPolicy::Sequential).is_err());
    }

    #[test]
    fn regimes_report_both_schedules() {
        let (cg, data) = graph(7, 4, 4, 1, Readout::MeanPool);
        let samples: Vec<(Vec<i64>, usize)> = data.iter().map(|u| (cg.network.quantize_tokens(u).unwrap(), 0)).collect();
        let rows = benchmark_regimes(&cg, &samples, &StepCostModel::default(), ExecPolicy::Parallel).unwrap();
        assert_eq!(rows.len(), 2);
        let (ft, pipe) = (&rows[0], &rows[1]);
        assert!(pipe.metrics.throughput_tokens > ft.metrics.throughput_tokens);
        assert!(ft.metrics.latency_per_token < pipe.metrics.latency_per_token);
        for r in &rows {
            assert_eq!(r.metrics.edp_per_token, r.metrics.energy_per_token * r.metrics.latency_per_token);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_token_streams_are_bit_exact(seed in 0u64..1000, len in 1usize..40, period in 1usize..14) {
            let (cg, _) = graph(seed % 7, 4, 3, 2, Readout::MeanPool);
            let (lo, hi) = int_range(cg.network.spec.spike_bits);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tokens: Vec<i64> = (0..2 * len).map(|_| rng.gen_range(lo..=hi)).collect();
            let sched = InjectionSchedule { kind: ScheduleKind::Pipelined, period };
            let out = run(&cg, &tokens, &sched, &StepCostModel::default(), ExecPolicy::Sequential).unwrap();
            prop_assert_eq!(out.logits, cg.network.run_sequence(&tokens).unwrap().1);
        }
    }
}
