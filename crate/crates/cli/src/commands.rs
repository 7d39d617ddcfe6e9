//! The pipeline stages: train → ptq → qaft → eval → simulate → bench, plus
//! cost-model calibration.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use neurossm::checkpoint::{self, ArtifactKind, ModelArtifact};
use neurossm::config::{ExperimentConfig, Stage};
use neurossm::data::{data_dir, load_dataset, SequenceDataset};
use neurossm::model::{count_parameters, DiscreteNetwork, Network};
use neurossm::parallel::map_slice;
use neurossm::quant::{ptq, IntegerNetwork, QuantizedNetwork};
use neurossm::sim::{benchmark_regimes, build_core_graph, fit_cost, read_targets, run, CostTarget, RunMetrics, ScheduleKind};
use neurossm::train::{evaluate_float, evaluate_integer, evaluate_streaming, qaft, train, EpochRecord, TrainReport};
use neurossm::ExecPolicy;

use crate::error::{io_err, CliError, CliResult};
use crate::report::{ensure_parent, JsonlWriter, Report};

pub const FLOAT_CKPT: &str = "float.ckpt";
pub const PTQ_CKPT: &str = "ptq.ckpt";
pub const QAFT_CKPT: &str = "qaft.ckpt";

/// Resolved inputs shared by every command.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub data_dir: PathBuf,
    pub policy: ExecPolicy,
    /// Suppresses per-epoch progress lines on stderr.
    pub quiet: bool,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, data_dir_flag: Option<&Path>, policy: ExecPolicy) -> Self {
        Self { cfg, data_dir: data_dir(data_dir_flag), policy, quiet: false }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn datasets(&self) -> CliResult<(SequenceDataset, SequenceDataset)> {
        let (tr, te) = load_dataset(&self.cfg.dataset, &self.data_dir)?;
        if tr.seq_len != self.cfg.model.seq_len {
            return Err(neurossm::Error::Config(format!("dataset has length {} but model.seq_len = {}", tr.seq_len, self.cfg.model.seq_len)).into());
        }
        Ok((tr, te))
    }

    fn stream_subset(&self, test: &SequenceDataset) -> SequenceDataset {
        match self.cfg.eval.stream_samples {
            Some(n) => test.take(n),
            None => test.clone(),
        }
    }

    /// Loads `name` from the output directory, checking its kind and the hash
    /// of the configuration that produced it.
    fn prerequisite(&self, name: &str, stage: Stage, kind: ArtifactKind, producer: &'static str) -> CliResult<ModelArtifact> {
        let path = self.out(name);
        if !path.exists() {
            let what = match kind {
                ArtifactKind::Float => "float checkpoint",
                _ => "quantized checkpoint",
            };
            return Err(CliError::MissingPrerequisite { what, path, stage: producer });
        }
        let (art, info) = checkpoint::load(&path)?;
        let expected = self.cfg.stage_hash(stage);
        let stored = info.config_hash.unwrap_or_default();
        if stored != expected {
            return Err(CliError::ConfigMismatch { path, stored, expected });
        }
        if art.kind() != kind {
            return Err(neurossm::Error::Format { offset: 12, msg: format!("{name} holds a {:?} network", art.kind()) }.into());
        }
        Ok(art)
    }

    fn float_net(&self) -> CliResult<Network<f32>> {
        match self.prerequisite(FLOAT_CKPT, Stage::Train, ArtifactKind::Float, "train")? {
            ModelArtifact::Float(n) => Ok(n),
            _ => unreachable!(),
        }
    }

    fn quantized(&self, name: &str, stage: Stage, producer: &'static str) -> CliResult<QuantizedNetwork> {
        match self.prerequisite(name, stage, ArtifactKind::Quantized, producer)? {
            ModelArtifact::Quantized(q) => Ok(q),
            _ => unreachable!(),
        }
    }

    /// The most refined quantized network available: QAFT, else PTQ.
    fn deployed(&self) -> CliResult<(QuantizedNetwork, &'static str)> {
        if self.out(QAFT_CKPT).exists() {
            Ok((self.quantized(QAFT_CKPT, Stage::Qaft, "qaft")?, "qaft"))
        } else {
            Ok((self.quantized(PTQ_CKPT, Stage::Ptq, "ptq")?, "ptq"))
        }
    }

    fn save(&self, name: &str, art: &ModelArtifact, stage: Stage) -> CliResult<Value> {
        let path = self.out(name);
        let digest = checkpoint::save(&path, art, self.cfg.seed, Some(&self.cfg.stage_hash(stage)))?;
        Ok(json!({ "path": path, "digest": digest }))
    }
}

fn epoch_logger<'a>(ctx: &'a Context, log: &'a mut JsonlWriter, stage: &'a str, err: &'a mut Option<CliError>) -> impl FnMut(&EpochRecord) + 'a {
    move |r: &EpochRecord| {
        ctx.log(format!(
            "[{stage}] epoch {:>3}  train loss {:.4}  train acc {:.4}  test acc {:.4}  ({:.1}s)",
            r.epoch, r.train_loss, r.train_accuracy, r.test_accuracy, r.seconds
        ));
        if let Err(e) = log.record(&json!({ "stage": stage, "record": r })) {
            err.get_or_insert(e);
        }
    }
}

fn training_results(r: &TrainReport) -> (Value, Value) {
    let stripped = r.without_timings();
    (
        json!({
            "best_epoch": r.best_epoch,
            "best_test_accuracy": r.best_test_accuracy,
            "initial_test_accuracy": r.initial_test_accuracy,
            "epochs": stripped.epochs,
        }),
        json!({ "wall_seconds": r.wall_seconds, "epoch_seconds": r.epochs.iter().map(|e| e.seconds).collect::<Vec<_>>() }),
    )
}

pub fn cmd_train(ctx: &Context) -> CliResult<Value> {
    let cfg = &ctx.cfg;
    let (tr, te) = ctx.datasets()?;
    let net = Network::<f32>::init(&cfg.model, cfg.seed)?;
    ctx.log(format!("training {} parameters on {} samples ({} test)", count_parameters(&cfg.model), tr.len(), te.len()));
    let mut log = JsonlWriter::create(&ctx.out("train_metrics.jsonl"))?;
    let mut log_err = None;
    let (best, report) = train(&net, &tr, &te, &cfg.train_config(), ctx.policy, &mut epoch_logger(ctx, &mut log, "train", &mut log_err))?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let ckpt = ctx.save(FLOAT_CKPT, &ModelArtifact::Float(best.clone()), Stage::Train)?;
    let (loss, acc) = evaluate_float(&best.discretize()?, &te, ctx.policy)?;
    let (mut results, timing) = training_results(&report);
    results["test_accuracy"] = json!(acc);
    results["test_loss"] = json!(loss);
    results["parameter_count"] = json!(count_parameters(&cfg.model));
    results["checkpoint"] = ckpt;
    Report::new("train", results).with_stage_hash(cfg.stage_hash(Stage::Train)).with_timing(timing).write(cfg, &cfg.output_dir)
}

pub fn cmd_ptq(ctx: &Context) -> CliResult<Value> {
    let cfg = &ctx.cfg;
    let net = ctx.float_net()?;
    let (tr, te) = ctx.datasets()?;
    let t0 = Instant::now();
    let calib = tr.take(cfg.calibration_samples).inputs;
    let q = ptq(&net, &cfg.quant, &calib, ctx.policy)?;
    let inet = IntegerNetwork::extract(&q)?;
    let stream = ctx.stream_subset(&te);
    let (_, float_acc) = evaluate_float(&net.discretize()?, &te, ctx.policy)?;
    let (_, weights_acc) = evaluate_float(&q.to_discrete::<f32>(), &te, ctx.policy)?;
    let int_acc = evaluate_integer(&inet, &stream, ctx.policy)?;
    let ckpt = ctx.save(PTQ_CKPT, &ModelArtifact::Quantized(q.clone()), Stage::Ptq)?;
    ctx.log(format!("float {float_acc:.4}  ptq integer {int_acc:.4} on {} samples", stream.len()));
    let results = json!({
        "float_conv_accuracy": float_acc,
        "quantized_weights_conv_accuracy": weights_acc,
        "integer_accuracy": int_acc,
        "integer_samples": stream.len(),
        "calibration_samples": calib.len(),
        "activation_bounds": q.activations,
        "parameter_count": count_parameters(&cfg.model),
        "checkpoint": ckpt,
    });
    Report::new("ptq", results)
        .with_stage_hash(cfg.stage_hash(Stage::Ptq))
        .with_timing(json!({ "wall_seconds": t0.elapsed().as_secs_f64() }))
        .write(cfg, &cfg.output_dir)
}

pub fn cmd_qaft(ctx: &Context) -> CliResult<Value> {
    let cfg = &ctx.cfg;
    let start = ctx.quantized(PTQ_CKPT, Stage::Ptq, "ptq")?;
    let (tr, te) = ctx.datasets()?;
    let stream = ctx.stream_subset(&te);
    let mut log = JsonlWriter::create(&ctx.out("qaft_metrics.jsonl"))?;
    let mut log_err = None;
    let (tuned, report) = qaft(&start, &tr, &stream, &cfg.qaft_config(), ctx.policy, &mut epoch_logger(ctx, &mut log, "qaft", &mut log_err))?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let ckpt = ctx.save(QAFT_CKPT, &ModelArtifact::Quantized(tuned), Stage::Qaft)?;
    let (mut results, timing) = training_results(&report);
    results["integer_accuracy"] = json!(report.best_test_accuracy);
    results["ptq_integer_accuracy"] = json!(report.initial_test_accuracy);
    results["integer_samples"] = json!(stream.len());
    results["parameter_count"] = json!(count_parameters(&cfg.model));
    results["checkpoint"] = ckpt;
    Report::new("qaft", results).with_stage_hash(cfg.stage_hash(Stage::Qaft)).with_timing(timing).write(cfg, &cfg.output_dir)
}

fn float_eval(ctx: &Context, d: &DiscreteNetwork<f32>, te: &SequenceDataset, stream: &SequenceDataset) -> CliResult<Value> {
    let (loss, conv) = evaluate_float(d, te, ctx.policy)?;
    let streaming = evaluate_streaming(d, stream, ctx.policy)?;
    Ok(json!({ "conv_accuracy": conv, "conv_loss": loss, "conv_samples": te.len(), "streaming_accuracy": streaming, "streaming_samples": stream.len() }))
}

fn quantized_eval(ctx: &Context, q: &QuantizedNetwork, te: &SequenceDataset, stream: &SequenceDataset) -> CliResult<Value> {
    let (loss, conv) = evaluate_float(&q.to_discrete::<f32>(), te, ctx.policy)?;
    let inet = IntegerNetwork::extract(q)?;
    let streaming = evaluate_integer(&inet, stream, ctx.policy)?;
    Ok(json!({
        "conv_accuracy": conv,
        "conv_loss": loss,
        "conv_samples": te.len(),
        "streaming_accuracy": streaming,
        "streaming_samples": stream.len(),
    }))
}

/// Accuracy of every available stage in convolution mode and token by
/// token. With `untrained`, a freshly initialized network stands in for the
/// float checkpoint.
pub fn cmd_eval(ctx: &Context, untrained: bool) -> CliResult<Value> {
    let cfg = &ctx.cfg;
    let t0 = Instant::now();
    let float = if untrained {
        Some(Network::<f32>::init(&cfg.model, cfg.seed)?)
    } else if ctx.out(FLOAT_CKPT).exists() {
        Some(ctx.float_net()?)
    } else {
        None
    };
    let ptq_q = if !untrained && ctx.out(PTQ_CKPT).exists() { Some(ctx.quantized(PTQ_CKPT, Stage::Ptq, "ptq")?) } else { None };
    let qaft_q = if !untrained && ctx.out(QAFT_CKPT).exists() { Some(ctx.quantized(QAFT_CKPT, Stage::Qaft, "qaft")?) } else { None };
    if float.is_none() && ptq_q.is_none() && qaft_q.is_none() {
        return Err(CliError::MissingPrerequisite { what: "checkpoint", path: ctx.out(FLOAT_CKPT), stage: "train" });
    }
    let (_, te) = ctx.datasets()?;
    let stream = ctx.stream_subset(&te);
    let mut results = json!({ "parameter_count": count_parameters(&cfg.model), "untrained": untrained });
    if let Some(n) = &float {
        results["full_precision"] = float_eval(ctx, &n.discretize()?, &te, &stream)?;
    }
    if let Some(q) = &ptq_q {
        results["ptq"] = quantized_eval(ctx, q, &te, &stream)?;
    }
    if let Some(q) = &qaft_q {
        results["qaft"] = quantized_eval(ctx, q, &te, &stream)?;
    }
    for stage in ["full_precision", "ptq", "qaft"] {
        if let Some(r) = results.get(stage) {
            ctx.log(format!("{stage:>15}: conv {:.4}  streaming {:.4}", r["conv_accuracy"], r["streaming_accuracy"]));
        }
    }
    Report::new("eval", results).with_timing(json!({ "wall_seconds": t0.elapsed().as_secs_f64() })).write(cfg, &cfg.output_dir)
}

fn test_tokens(inet: &IntegerNetwork, te: &SequenceDataset, n: usize) -> CliResult<Vec<(Vec<i64>, usize)>> {
    let sub = te.take(n);
    sub.inputs.iter().zip(&sub.labels).map(|(u, y)| Ok((inet.quantize_tokens(u)?, *y))).collect()
}

pub fn cmd_simulate(ctx: &Context) -> CliResult<Value> {
    let cfg = &ctx.cfg;
    let t0 = Instant::now();
    let (q, source) = ctx.deployed()?;
    let inet = IntegerNetwork::extract(&q)?;
    let cg = build_core_graph(&inet, &cfg.placement)?;
    let sched = cfg.schedule.resolve(cg.depth());
    let (_, te) = ctx.datasets()?;
    let samples = test_tokens(&inet, &te, cfg.eval.simulate_samples)?;
    let outs = map_slice(ctx.policy, &samples, |(tokens, _)| -> neurossm::Result<(neurossm::sim::SimOutput, bool)> {
        let out = run(&cg, tokens, &sched, &cfg.cost, ExecPolicy::Sequential)?;
        let (_, reference) = inet.run_sequence(tokens)?;
        Ok((out.clone(), out.logits == reference))
    });
    let (mut correct, mut exact, mut metrics) = (0, 0, Vec::new());
    let mut synops = 0u64;
    let mut updates = 0u64;
    for (o, (_, y)) in outs.into_iter().zip(&samples) {
        let (o, same) = o?;
        correct += usize::from(o.prediction() == *y);
        exact += usize::from(same);
        synops += o.counters.synops;
        updates += o.counters.neuron_updates;
        metrics.push(o.metrics);
    }
    let n = samples.len().max(1);
    ctx.log(format!("{} cores, depth {}, {}/{} bit-exact, accuracy {:.4}", cg.core_count(), cg.depth(), exact, samples.len(), correct as f64 / n as f64));
    let results = json!({
        "network": source,
        "cores": cg.core_count(),
        "depth": cg.depth(),
        "stage_cores": cg.stage_core_counts(),
        "schedule": sched,
        "samples": samples.len(),
        "accuracy": correct as f64 / n as f64,
        "bit_exact_samples": exact,
        "synops": synops,
        "neuron_updates": updates,
        "metrics": RunMetrics::mean(&metrics),
    });
    Report::new("simulate", results).with_timing(json!({ "wall_seconds": t0.elapsed().as_secs_f64() })).write(cfg, &cfg.output_dir)
}

fn model_label(cfg: &neurossm::model::NetworkConfig) -> String {
    match (cfg.model_dim, cfg.state_dim) {
        (64, 32) => "small".into(),
        (128, 64) => "large".into(),
        (h, n) => format!("h{h}n{n}"),
    }
}

/// A row with the results-table units: mJ, ms, µJ·s.
fn table_row(cfg: &ExperimentConfig, schedule: ScheduleKind, m: &RunMetrics) -> CostTarget {
    CostTarget {
        dataset: format!("{:?}", cfg.dataset.name).to_lowercase(),
        model: model_label(&cfg.model),
        input_dim: cfg.model.input_dim,
        seq_len: cfg.model.seq_len,
        schedule,
        energy_mj_per_token: m.energy_per_token * 1e3,
        latency_ms_per_token: m.latency_per_token * 1e3,
        throughput_tokens_per_s: m.throughput_tokens,
        edp_uj_s_per_token: m.edp_per_token * 1e6,
        energy_mj_per_sample: m.energy_per_sample * 1e3,
        latency_ms_per_sample: m.latency_per_sample * 1e3,
        throughput_samples_per_s: m.throughput_samples,
        edp_uj_s_per_sample: m.edp_per_sample * 1e6,
    }
}

pub fn write_table(path: &Path, rows: &[CostTarget]) -> CliResult<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Serialize)]
struct HostThroughput {
    /// Tokens per second of the float streaming engine on this machine.
    float_stream_tokens_per_s: f64,
    /// Tokens per second of the integer reference engine on this machine.
    integer_stream_tokens_per_s: f64,
    tokens: usize,
}

fn host_throughput(q: &QuantizedNetwork, samples: &[(Vec<i64>, usize)], inputs: &[Vec<f32>]) -> CliResult<HostThroughput> {
    let d = q.to_discrete::<f32>();
    let tokens: usize = inputs.len() * q.config.seq_len;
    let t0 = Instant::now();
    for u in inputs {
        let mut sc = d.new_context();
        let len = q.config.seq_len;
        let mut tok = vec![0.0f32; q.config.input_dim];
        for t in 0..len {
            for (f, v) in tok.iter_mut().enumerate() {
                *v = u[f * len + t];
            }
            d.forward_stream(&mut sc, &tok)?;
        }
    }
    let float_s = t0.elapsed().as_secs_f64();
    let inet = IntegerNetwork::extract(q)?;
    let t0 = Instant::now();
    for (s, _) in samples {
        inet.run_sequence(s)?;
    }
    let int_s = t0.elapsed().as_secs_f64();
    Ok(HostThroughput {
        float_stream_tokens_per_s: tokens as f64 / float_s.max(1e-12),
        integer_stream_tokens_per_s: tokens as f64 / int_s.max(1e-12),
        tokens,
    })
}

/// Simulated energy, latency, throughput and EDP under both schedules, in
/// the column layout of the published results table.
pub fn cmd_bench(ctx: &Context) -> CliResult<Value> {
    let cfg = &ctx.cfg;
    let t0 = Instant::now();
    let (q, source) = ctx.deployed()?;
    let inet = IntegerNetwork::extract(&q)?;
    let cg = build_core_graph(&inet, &cfg.placement)?;
    let (_, te) = ctx.datasets()?;
    let samples = test_tokens(&inet, &te, cfg.eval.simulate_samples)?;
    let regimes = benchmark_regimes(&cg, &samples, &cfg.cost, ctx.policy)?;
    let rows: Vec<CostTarget> = regimes.iter().map(|r| table_row(cfg, r.schedule, &r.metrics)).collect();
    let csv_path = ctx.out("bench.csv");
    write_table(&csv_path, &rows)?;
    let host = host_throughput(&q, &samples, &te.take(cfg.eval.simulate_samples).inputs)?;
    for r in &rows {
        ctx.log(format!(
            "{:>12}: {:.4} mJ/token  {:.4} ms/token  {:.0} tokens/s  EDP {:.6} uJ*s",
            format!("{:?}", r.schedule),
            r.energy_mj_per_token,
            r.latency_ms_per_token,
            r.throughput_tokens_per_s,
            r.edp_uj_s_per_token
        ));
    }
    ctx.log(format!("host streaming engine (software, not simulated): {:.0} tokens/s", host.float_stream_tokens_per_s));
    let results = json!({
        "network": source,
        "cores": cg.core_count(),
        "depth": cg.depth(),
        "samples": samples.len(),
        "csv": csv_path,
        "rows": rows,
        "regimes": regimes.iter().map(|r| json!({ "schedule": r.schedule, "period": r.period, "correct": r.correct, "counters": r.counters })).collect::<Vec<_>>(),
    });
    Report::new("bench", results)
        .with_timing(json!({ "wall_seconds": t0.elapsed().as_secs_f64(), "host_software_throughput": host }))
        .write(cfg, &cfg.output_dir)
}

/// Cost-model file: the step-cost parameters and the schedule as flat keys.
pub fn cost_file_text(cfg: &ExperimentConfig, cost: &neurossm::sim::StepCostModel) -> String {
    let mut t = toml::Table::try_from(cost).expect("cost serializes");
    let kind = serde_json::to_value(cfg.schedule.kind).expect("schedule serializes");
    t.insert("schedule".into(), toml::Value::String(kind.as_str().unwrap_or_default().into()));
    if let Some(p) = cfg.schedule.period {
        t.insert("period".into(), toml::Value::Integer(p as i64));
    }
    toml::to_string(&t).expect("cost table serializes")
}

/// Overrides equivalent to a cost-model file.
pub fn cost_file_overrides(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, v) in table {
        let rendered = v.to_string();
        out.push(match k.as_str() {
            "schedule" => format!("schedule.kind={rendered}"),
            "period" => format!("schedule.period={rendered}"),
            _ => format!("cost.{k}={rendered}"),
        });
    }
    Ok(out)
}

pub fn cmd_fit_cost(ctx: &Context, targets_path: &Path) -> CliResult<Value> {
    let cfg = &ctx.cfg;
    let text = std::fs::read_to_string(targets_path).map_err(io_err(targets_path))?;
    let targets = read_targets(&text)?;
    let fit = fit_cost(&targets, &cfg.placement)?;
    let cost_path = ctx.out("fitted_cost.toml");
    ensure_parent(&cost_path)?;
    std::fs::write(&cost_path, cost_file_text(cfg, &fit.model)).map_err(io_err(&cost_path))?;
    ctx.log(format!(
        "max relative error: timing {:.3}, energy {:.3} (written to {})",
        fit.max_timing_rel_error,
        fit.max_energy_rel_error,
        cost_path.display()
    ));
    let results = json!({
        "targets": targets_path,
        "rows": targets.len(),
        "model": fit.model,
        "max_timing_rel_error": fit.max_timing_rel_error,
        "max_energy_rel_error": fit.max_energy_rel_error,
        "residuals": fit.residuals,
        "cost_file": cost_path,
    });
    Report::new("fit-cost", results).write(cfg, &cfg.output_dir)
}
