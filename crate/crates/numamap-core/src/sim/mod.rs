//! Discrete-time harness: one epoch is one decision interval of the
//! mapping control loop. Each epoch applies the scenario's arrivals and
//! departures, runs the chosen algorithm (vanilla churn or the
//! shared-memory control loop), estimates every live VM's performance,
//! synthesizes counter samples, and records everything in a replayable
//! trace. Runs are deterministic for a fixed configuration; repeats and
//! algorithm comparisons fan out across worker threads, each run owning
//! its own rng and state.

mod stats;
mod trace;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapper::{
    self, admit_arrival, vanilla_place_arrival, vanilla_step, Action, AlgoConfig, BenefitMatrix,
    ClassMatrix, MappingState, Metric, PendingBenefitUpdate, VanillaParams,
};
use crate::perfmodel::{estimate_perf_biased, measured_perf, sample_counters, PerfParams};
use crate::topology::{CoreId, Topology};
use crate::workload::{preset, ScenarioEvent, VmId, VmSpec};

pub use stats::{
    aggregate, compare, render_comparison_table, render_stats_table, stats_to_csv, to_csv,
    ComparisonGroupRow, ComparisonReport, ComparisonRow, RunStats, VmStats,
};
pub use trace::{EpochRecord, RunSummary, RunTrace, VmEpochRecord, VmMeta};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no traces to aggregate")]
    NoTraces,
    #[error("traces disagree on configuration: {0}")]
    MismatchedConfigs(String),
    #[error("comparison needs at least two run configurations")]
    TooFewConfigs,
    #[error("comparison configs must differ only in algorithm: {0}")]
    NotComparable(String),
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

/// The mapping policy driving a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Default-scheduler baseline: random migration, overbooking allowed.
    Vanilla,
    /// Shared-memory algorithm steered by IPC.
    SmIpc,
    /// Shared-memory algorithm steered by MPI.
    SmMpi,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Vanilla, Algorithm::SmIpc, Algorithm::SmMpi];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Vanilla => "vanilla",
            Algorithm::SmIpc => "sm-ipc",
            Algorithm::SmMpi => "sm-mpi",
        }
    }

    pub fn is_shared_memory(&self) -> bool {
        !matches!(self, Algorithm::Vanilla)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(Algorithm::Vanilla),
            "sm-ipc" => Ok(Algorithm::SmIpc),
            "sm-mpi" => Ok(Algorithm::SmMpi),
            other => Err(format!("unknown algorithm {other:?}")),
        }
    }
}

/// Everything one run needs, echoed verbatim into its trace so the run
/// can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Paths (or labels) of the input documents, for the record only.
    pub topology: String,
    pub scenario: String,
    pub perf_params: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub epochs: u64,
    pub repeats: u32,
    /// Leading epochs excluded from summary statistics.
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default)]
    pub algo: AlgoConfig,
    #[serde(default)]
    pub vanilla: VanillaParams,
}

fn default_warmup() -> u64 {
    3
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, seed: u64, epochs: u64) -> Self {
        RunConfig {
            topology: String::new(),
            scenario: String::new(),
            perf_params: String::new(),
            algorithm,
            seed,
            epochs,
            repeats: 1,
            warmup: default_warmup(),
            algo: AlgoConfig::default(),
            vanilla: VanillaParams::default(),
        }
    }

    /// Equal up to seed (and repeat count): the repeats of one experiment.
    pub fn same_experiment(&self, other: &RunConfig) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.seed = 0;
        b.seed = 0;
        a.repeats = 1;
        b.repeats = 1;
        a == b
    }

    /// Equal up to the algorithm: comparable sides of one comparison.
    pub fn same_workload(&self, other: &RunConfig) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.algorithm = Algorithm::Vanilla;
        b.algorithm = Algorithm::Vanilla;
        a == b
    }

    fn metric(&self) -> Metric {
        match self.algorithm {
            Algorithm::SmMpi => Metric::Mpi,
            _ => Metric::Ipc,
        }
    }
}

/// Parsed inputs shared across runs.
#[derive(Clone, Copy)]
pub struct RunInputs<'a> {
    pub topology: &'a Topology,
    pub scenario: &'a [ScenarioEvent],
    pub params: &'a PerfParams,
}

/// Executes one run: `cfg.epochs` decision intervals of the configured
/// algorithm over the scenario. Arrivals that exceed capacity are
/// rejected and logged, never fatal.
pub fn run(inputs: &RunInputs<'_>, cfg: &RunConfig) -> RunTrace {
    let t = inputs.topology;
    let mut algo_cfg = cfg.algo.clone();
    algo_cfg.metric = cfg.metric();

    let mut state = MappingState::new(t);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cm = ClassMatrix::default();
    let mut bm = BenefitMatrix::default();
    let mut pending: Vec<PendingBenefitUpdate> = Vec::new();
    let mut live: BTreeMap<VmId, VmSpec> = BTreeMap::new();
    let mut bias: BTreeMap<VmId, f64> = BTreeMap::new();
    let mut measured: BTreeMap<VmId, f64> = BTreeMap::new();
    let mut vm_meta: BTreeMap<VmId, VmMeta> = BTreeMap::new();

    let mut by_time: BTreeMap<u64, Vec<&ScenarioEvent>> = BTreeMap::new();
    for ev in inputs.scenario {
        by_time.entry(ev.time()).or_default().push(ev);
    }

    let mut epochs: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let mut actions: Vec<Action> = Vec::new();
        let mut warnings: Vec<String> = Vec::new();
        let mut arrived_now: Vec<VmId> = Vec::new();

        for ev in by_time.get(&epoch).map(|v| v.as_slice()).unwrap_or(&[]) {
            match ev {
                ScenarioEvent::Arrive { vm, .. } => {
                    let outcome = if cfg.algorithm.is_shared_memory() {
                        admit_arrival(vm, &mut state, t, &cm, &live, &algo_cfg)
                    } else {
                        vanilla_place_arrival(vm, &mut state, t, &mut rng, &cfg.vanilla).map(
                            |cores| {
                                vec![Action::Arrival {
                                    vm: vm.id.clone(),
                                    to_cores: cores,
                                    violations: 0,
                                    best_effort: false,
                                }]
                            },
                        )
                    };
                    match outcome {
                        Ok(mut acts) => {
                            actions.append(&mut acts);
                            live.insert(vm.id.clone(), vm.clone());
                            arrived_now.push(vm.id.clone());
                            vm_meta.insert(vm.id.clone(), VmMeta::of(vm));
                            if !cfg.algorithm.is_shared_memory() && cfg.vanilla.churn_sigma > 0.0 {
                                let s = cfg.vanilla.churn_sigma;
                                // Mean-one log-normal: this run's placement luck.
                                let normal = Normal::new(-s * s / 2.0, s).expect("sigma > 0");
                                bias.insert(vm.id.clone(), normal.sample(&mut rng).exp());
                            }
                        }
                        Err(e) => {
                            actions.push(Action::Reject {
                                vm: vm.id.clone(),
                                error: e.to_string(),
                            });
                        }
                    }
                }
                ScenarioEvent::Depart { vm, .. } => {
                    state.free_vm(vm, t);
                    live.remove(vm);
                    bias.remove(vm);
                    measured.remove(vm);
                    actions.push(Action::Depart { vm: vm.clone() });
                }
            }
        }

        if cfg.algorithm.is_shared_memory() {
            let outcome = mapper::step(
                &mut state, &live, &measured, &algo_cfg, t, &cm, &mut bm, &mut pending,
            );
            actions.extend(outcome.actions);
            for vm in outcome.skipped_no_sample {
                if !arrived_now.contains(&vm) {
                    warnings.push(format!("no sample for live VM {vm}; skipped this epoch"));
                }
            }
        } else {
            vanilla_step(&mut state, t, &mut rng, &cfg.vanilla);
        }

        let mut vm_records = BTreeMap::new();
        let mut next_measured = BTreeMap::new();
        for (id, spec) in &live {
            let b = bias.get(id).copied().unwrap_or(1.0);
            let est = estimate_perf_biased(spec, &state, t, &live, inputs.params, &mut rng, b)
                .expect("live VMs are mapped and have memory");
            let counters = sample_counters(&est, spec, inputs.params);
            next_measured.insert(
                id.clone(),
                measured_perf(algo_cfg.metric, &counters, spec.class, inputs.params),
            );
            vm_records.insert(
                id.clone(),
                VmEpochRecord {
                    p: est.p,
                    contention: est.contention,
                    locality: est.locality,
                    overbooking: est.overbooking,
                    noise: est.noise,
                    ipc: counters.ipc,
                    mpi: counters.mpi,
                },
            );
        }
        measured = next_measured;

        let mapping: BTreeMap<VmId, Vec<CoreId>> = live
            .keys()
            .map(|id| (id.clone(), state.cores_of(id).expect("live VM mapped").to_vec()))
            .collect();
        epochs.push(EpochRecord::new(epoch, mapping, vm_records, actions, warnings));
        state.advance_epoch();
    }

    RunTrace::assemble(cfg.clone(), epochs, vm_meta)
}

/// Runs `cfg.repeats` independent repeats (seeds `seed..seed+repeats`) in
/// parallel, in stable order.
pub fn run_repeats(inputs: &RunInputs<'_>, cfg: &RunConfig) -> Vec<RunTrace> {
    (0..cfg.repeats.max(1))
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = cfg.seed + i as u64;
            run(inputs, &c)
        })
        .collect()
}

/// The preset name a VM's shape corresponds to, or "custom".
pub(crate) fn vm_type_name(spec: &VmSpec) -> String {
    for name in ["small", "medium", "large", "huge"] {
        let p = preset(name).expect("fixed table");
        if p.vcpus == spec.vcpus && p.memory == spec.memory {
            return name.to_string();
        }
    }
    "custom".to_string()
}

#[cfg(test)]
mod tests;
