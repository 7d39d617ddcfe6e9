//! Discrete-time simulator of a neuromorphic chip running the integer
//! network: neurocore placement, graded-spike message passing in lock-step
//! time steps, injection schedules and a calibratable cost model.

mod cost;
mod engine;
mod fit;
mod placement;

pub use cost::{
    active_stages, compute_edp, predict, sample_timing, steady_state, InjectionSchedule, RunMetrics, ScheduleKind, StepCostModel,
};
pub use engine::{benchmark_regimes, run, Counters, RegimeReport, SimOutput};
pub use fit::{fit_cost, nnls_small, read_targets, Column, CostTarget, FitReport, FitResidual};
pub use placement::{build_core_graph, place, stage_shapes, Core, CoreGraph, Dynamics, PlacementConfig, Stage, StageKind, StageShape, Workload};
