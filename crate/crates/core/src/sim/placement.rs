//! Mapping of an integer network onto neurocores.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::quant::{IntegerLinear, IntegerNetwork};

/// Neuron dynamics hosted by a core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    /// Holds the token sequence and injects it.
    Input,
    /// Linear neuron without rectification (encoder, decoder).
    Accumulator,
    /// Rectified neuron with a bias (mixing layers).
    ReluBias,
    /// Complex state neurons of one or more channels plus each channel's
    /// rectified readout neuron. The recurrence lives inside the neuron,
    /// there are no self-connections.
    SsmState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Input,
    Encoder,
    Ssm(usize),
    Mix(usize),
    Decoder,
}

impl StageKind {
    pub fn dynamics(self) -> Dynamics {
        match self {
            StageKind::Input => Dynamics::Input,
            StageKind::Encoder | StageKind::Decoder => Dynamics::Accumulator,
            StageKind::Mix(_) => Dynamics::ReluBias,
            StageKind::Ssm(_) => Dynamics::SsmState,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementConfig {
    pub max_neurons_per_core: usize,
    /// Load (synapses plus weighted neuron updates) a core is filled to.
    pub target_work_per_core: u64,
    /// Work units charged for one complex state-neuron update.
    pub state_update_cost: u64,
    /// Cores available on the chip.
    pub max_cores: usize,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self { max_neurons_per_core: 8192, target_work_per_core: 2500, state_update_cost: 4, max_cores: 128 }
    }
}

/// Per-stage structure, independent of parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageShape {
    pub kind: StageKind,
    /// Output units: neurons for dense stages, channels for SSM stages.
    pub units: usize,
    pub neurons_per_unit: usize,
    /// Incoming synapses per unit, dense.
    pub synapses_per_unit: usize,
    pub work_per_unit: u64,
}

pub fn stage_shapes(cfg: &NetworkConfig, placement: &PlacementConfig) -> Vec<StageShape> {
    let (i, h, n, c) = (cfg.input_dim, cfg.model_dim, cfg.state_dim, cfg.num_classes);
    let dense = |kind, units: usize, fan_in: usize| StageShape {
        kind,
        units,
        neurons_per_unit: 1,
        synapses_per_unit: fan_in,
        work_per_unit: fan_in as u64 + 1,
    };
    let mut v = vec![
        StageShape { kind: StageKind::Input, units: i, neurons_per_unit: 1, synapses_per_unit: 0, work_per_unit: 1 },
        dense(StageKind::Encoder, h, i),
    ];
    for b in 0..cfg.num_blocks {
        // input fan-out to the N states, N dendritic inputs to the readout
        v.push(StageShape {
            kind: StageKind::Ssm(b),
            units: h,
            neurons_per_unit: n + 1,
            synapses_per_unit: 2 * n,
            work_per_unit: n as u64 * placement.state_update_cost + 1 + 2 * n as u64,
        });
        v.push(dense(StageKind::Mix(b), h, h));
    }
    v.push(dense(StageKind::Decoder, c, h));
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Core {
    pub id: usize,
    pub stage: usize,
    pub units: Range<usize>,
    pub neurons: usize,
    pub work: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub kind: StageKind,
    pub units: usize,
    pub cores: Range<usize>,
}

/// Split every stage into balanced, contiguous unit ranges. Cores are
/// numbered in stage order so consecutive layers sit on neighboring cores.
pub fn place(shapes: &[StageShape], placement: &PlacementConfig) -> Result<(Vec<Stage>, Vec<Core>)> {
    if placement.max_neurons_per_core == 0 || placement.target_work_per_core == 0 {
        return Err(Error::Config("placement limits must be positive".into()));
    }
    let mut stages = Vec::with_capacity(shapes.len());
    let mut cores = Vec::new();
    for (s, sh) in shapes.iter().enumerate() {
        if sh.neurons_per_unit > placement.max_neurons_per_core {
            return Err(Error::Placement(format!(
                "{:?} needs {} neurons per unit, a core holds {}",
                sh.kind, sh.neurons_per_unit, placement.max_neurons_per_core
            )));
        }
        let by_work = (sh.units as u64 * sh.work_per_unit).div_ceil(placement.target_work_per_core) as usize;
        let by_neurons = (sh.units * sh.neurons_per_unit).div_ceil(placement.max_neurons_per_core);
        let mut k = by_work.max(by_neurons).clamp(1, sh.units.max(1));
        while sh.units.div_ceil(k) * sh.neurons_per_unit > placement.max_neurons_per_core {
            k += 1;
        }
        let first = cores.len();
        for j in 0..k {
            let units = j * sh.units / k..(j + 1) * sh.units / k;
            cores.push(Core {
                id: cores.len(),
                stage: s,
                neurons: units.len() * sh.neurons_per_unit,
                work: units.len() as u64 * sh.work_per_unit,
                units,
            });
        }
        stages.push(Stage { kind: sh.kind, units: sh.units, cores: first..cores.len() });
    }
    if cores.len() > placement.max_cores {
        return Err(Error::Placement(format!("network needs {} cores, {} available", cores.len(), placement.max_cores)));
    }
    Ok((stages, cores))
}

/// Integer network distributed over cores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreGraph {
    pub network: IntegerNetwork,
    pub placement: PlacementConfig,
    pub stages: Vec<Stage>,
    pub cores: Vec<Core>,
}

pub fn build_core_graph(inet: &IntegerNetwork, placement: &PlacementConfig) -> Result<CoreGraph> {
    inet.config.validate()?;
    let (stages, cores) = place(&stage_shapes(&inet.config, placement), placement)?;
    Ok(CoreGraph { network: inet.clone(), placement: placement.clone(), stages, cores })
}

fn nonzero_synapses(l: &IntegerLinear) -> u64 {
    l.weight.iter().filter(|w| **w != 0).count() as u64
}

impl CoreGraph {
    /// Number of synchronization stages from input to output.
    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn core_count(&self) -> usize {
        self.cores.len()
    }

    pub fn stage_core_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.cores.len()).collect()
    }

    pub fn max_stage_cores(&self) -> usize {
        self.stage_core_counts().into_iter().max().unwrap_or(0)
    }

    pub fn neuron_count(&self) -> usize {
        self.cores.iter().map(|c| c.neurons).sum()
    }

    /// Synaptic events per token when every spike is nonzero.
    pub fn dense_synops_per_token(&self) -> u64 {
        let net = &self.network;
        let mut total = nonzero_synapses(&net.encoder) + nonzero_synapses(&net.decoder);
        for b in &net.blocks {
            let states = b.b_re.iter().zip(&b.b_im).filter(|(r, i)| **r != 0 || **i != 0).count() as u64;
            total += states + (b.channels * b.state_dim) as u64 + nonzero_synapses(&b.mix);
        }
        total
    }

    /// Neuron updates per token (every hosted neuron updates once).
    pub fn updates_per_token(&self) -> u64 {
        self.neuron_count() as u64
    }

    pub fn workload(&self, seq_len: usize) -> Workload {
        Workload {
            stage_cores: self.stage_core_counts(),
            seq_len,
            synops_per_token: self.dense_synops_per_token() as f64,
            updates_per_token: self.updates_per_token() as f64,
        }
    }
}

/// Structure-only summary used by closed-form cost laws and calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub stage_cores: Vec<usize>,
    pub seq_len: usize,
    pub synops_per_token: f64,
    pub updates_per_token: f64,
}

impl Workload {
    /// Shape of a network from its configuration alone, with dense synapses.
    pub fn from_config(cfg: &NetworkConfig, placement: &PlacementConfig) -> Result<Self> {
        cfg.validate()?;
        let shapes = stage_shapes(cfg, placement);
        let (stages, _) = place(&shapes, placement)?;
        Ok(Self {
            stage_cores: stages.iter().map(|s| s.cores.len()).collect(),
            seq_len: cfg.seq_len,
            synops_per_token: shapes.iter().map(|s| (s.units * s.synapses_per_unit) as f64).sum(),
            updates_per_token: shapes.iter().map(|s| (s.units * s.neurons_per_unit) as f64).sum(),
        })
    }

    pub fn depth(&self) -> usize {
        self.stage_cores.len()
    }

    pub fn core_count(&self) -> usize {
        self.stage_cores.iter().sum()
    }
}
