//! The two-stage mapping algorithm and the vanilla baseline.
//!
//! Stage one handles arrivals: a new VM is spread over as few servers and
//! NUMA nodes as possible, avoiding class-matrix conflicts on shared LLC
//! groups, with memory placed local-first. When no conflict-free slot
//! exists but capacity does, a bounded reshuffle of running VMs opens one.
//!
//! Stage two runs every decision interval: VMs whose measured relative
//! performance deviates from their expected performance by at least the
//! threshold `T` are collected, sorted by deviation, and remapped away
//! from their worst interferer. Candidate destinations are scored with a
//! benefit matrix (per class and separation level) minus a move cost, and
//! the matrix itself is updated online from the improvement each remap
//! actually delivered.
//!
//! Cores are never overbooked here: each core runs zero or one vCPU. The
//! vanilla baseline in [`vanilla`] does overbook and migrates vCPUs
//! randomly, mimicking an untuned general-purpose scheduler.

mod placement;
mod remap;
mod state;
pub mod vanilla;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{CoreId, Topology};
use crate::workload::{AnimalClass, VmId, VmSpec};

pub use placement::{admit_arrival, place_arrival, reshuffle_for_arrival, Placement};
pub use remap::compute_remap;
pub use state::{MappingState, NodeCapacity};
pub use vanilla::{vanilla_place_arrival, vanilla_step, VanillaParams};

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("not enough free cores: need {needed}, have {free}")]
    InsufficientCores { needed: u32, free: u32 },
    #[error("not enough memory: demand {demand} bytes, short by {short_by}")]
    InsufficientMemory { demand: u64, short_by: u64 },
    #[error("VM {0} is already mapped")]
    AlreadyMapped(VmId),
    #[error("VM {0} is not mapped")]
    NotMapped(VmId),
}

/// Which classes may share an LLC group. Symmetric in the default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMatrix {
    compatible: [[bool; 3]; 3],
}

impl Default for ClassMatrix {
    /// Sheep go with everything; rabbits only with sheep; devils with
    /// sheep and other devils, never with rabbits.
    fn default() -> Self {
        let t = true;
        let f = false;
        ClassMatrix {
            // Rows and columns ordered sheep, rabbit, devil.
            compatible: [[t, t, t], [t, f, f], [t, f, t]],
        }
    }
}

impl ClassMatrix {
    pub fn compatible(&self, a: AnimalClass, b: AnimalClass) -> bool {
        self.compatible[class_index(a)][class_index(b)]
    }
}

pub(crate) fn class_index(c: AnimalClass) -> usize {
    match c {
        AnimalClass::Sheep => 0,
        AnimalClass::Rabbit => 1,
        AnimalClass::Devil => 2,
    }
}

/// Separation granularity a remap can buy a VM, ordered from weakest to
/// strongest: out of the interferer's LLC group, out of its socket, out
/// of its server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationLevel {
    Socket,
    NumaNode,
    ServerNode,
}

impl SeparationLevel {
    pub const ALL: [SeparationLevel; 3] = [
        SeparationLevel::Socket,
        SeparationLevel::NumaNode,
        SeparationLevel::ServerNode,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SeparationLevel::Socket => "socket",
            SeparationLevel::NumaNode => "numa_node",
            SeparationLevel::ServerNode => "server_node",
        }
    }

    fn index(&self) -> usize {
        match self {
            SeparationLevel::Socket => 0,
            SeparationLevel::NumaNode => 1,
            SeparationLevel::ServerNode => 2,
        }
    }
}

/// Learned benefit scores in [1, 10] per class and separation level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenefitMatrix {
    // [class][level], classes ordered sheep, rabbit, devil.
    benefit: [[f64; 3]; 3],
}

impl Default for BenefitMatrix {
    fn default() -> Self {
        BenefitMatrix {
            benefit: [
                [1.0, 1.0, 1.0], // sheep
                [4.0, 5.0, 6.0], // rabbit
                [7.0, 8.0, 9.0], // devil
            ],
        }
    }
}

impl BenefitMatrix {
    pub fn get(&self, class: AnimalClass, level: SeparationLevel) -> f64 {
        self.benefit[class_index(class)][level.index()]
    }

    pub fn set(&mut self, class: AnimalClass, level: SeparationLevel, value: f64) {
        self.benefit[class_index(class)][level.index()] = value.clamp(1.0, 10.0);
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.benefit
    }
}

/// Moves an entry toward ten times the observed relative improvement with
/// an exponential moving average, clamped to [1, 10].
pub fn update_benefit_matrix(
    bm: &mut BenefitMatrix,
    class: AnimalClass,
    level: SeparationLevel,
    p_before: f64,
    p_after: f64,
    eta: f64,
) {
    let improvement = (p_after - p_before) / p_before;
    let target = 10.0 * improvement;
    let current = bm.get(class, level);
    bm.set(class, level, current + eta * (target - current));
}

/// Control-loop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    /// Maximum tolerated relative performance deviation (p̄ − p) / p̄.
    pub threshold: f64,
    /// Decision interval in simulation ticks.
    pub duration: u64,
    /// Counter used to derive measured performance.
    pub metric: Metric,
    /// Bound on running VMs moved to make room for one arrival.
    pub max_reshuffles_per_epoch: usize,
    /// Move cost per relocated vCPU, in benefit points.
    pub move_cost_lambda: f64,
    /// Learning rate of the benefit-matrix update.
    pub benefit_eta: f64,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        AlgoConfig {
            threshold: 0.10,
            duration: 1,
            metric: Metric::Ipc,
            max_reshuffles_per_epoch: 2,
            // One benefit point is worth moving four vCPUs.
            move_cost_lambda: 0.25,
            benefit_eta: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ipc,
    Mpi,
}

/// VMs whose performance deviates by at least the threshold, sorted by
/// deviation, worst first.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AffectedList {
    pub entries: Vec<(VmId, f64)>,
}

impl AffectedList {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Collects VMs with (p̄ − p) / p̄ ≥ T, sorted descending by deviation.
/// VMs without a sample are skipped and reported separately.
pub fn detect_affected(
    vms: &BTreeMap<VmId, VmSpec>,
    samples: &BTreeMap<VmId, f64>,
    cfg: &AlgoConfig,
) -> (AffectedList, Vec<VmId>) {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (id, spec) in vms {
        let Some(&p) = samples.get(id) else {
            skipped.push(id.clone());
            continue;
        };
        let deviation = (spec.expected_perf - p) / spec.expected_perf;
        if deviation >= cfg.threshold {
            entries.push((id.clone(), deviation));
        }
    }
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    (AffectedList { entries }, skipped)
}

/// VMs that may share an LLC group with `vm`: class-compatible per the
/// class matrix, with overlapping candidate servers under both VMs'
/// affinity policies.
pub fn build_neighbor_list(
    vm: &VmSpec,
    live: &BTreeMap<VmId, VmSpec>,
    cm: &ClassMatrix,
    t: &Topology,
) -> BTreeSet<VmId> {
    let all_servers: BTreeSet<_> = t.servers.iter().map(|s| s.id).collect();
    let candidates = vm.affinity_servers.as_ref().unwrap_or(&all_servers);
    live.iter()
        .filter(|(id, _)| **id != vm.id)
        .filter(|(_, other)| cm.compatible(vm.class, other.class))
        .filter(|(_, other)| match &other.affinity_servers {
            Some(theirs) => theirs.intersection(candidates).next().is_some(),
            None => true,
        })
        .map(|(id, _)| id.clone())
        .collect()
}

/// One mapping decision, recorded in the run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Action {
    Arrival {
        vm: VmId,
        to_cores: Vec<CoreId>,
        violations: usize,
        best_effort: bool,
    },
    Reshuffle {
        vm: VmId,
        from_cores: Vec<CoreId>,
        to_cores: Vec<CoreId>,
    },
    Remap {
        vm: VmId,
        from_cores: Vec<CoreId>,
        to_cores: Vec<CoreId>,
        level: SeparationLevel,
        score: f64,
    },
    Reject {
        vm: VmId,
        error: String,
    },
    Depart {
        vm: VmId,
    },
}

/// A remap whose payoff is measured one epoch later.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingBenefitUpdate {
    pub vm: VmId,
    pub level: SeparationLevel,
    pub p_before: f64,
}

/// What one control-loop step did.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepOutcome {
    pub affected: AffectedList,
    pub actions: Vec<Action>,
    /// Live VMs without a sample this epoch, skipped by the detector.
    /// Expected for VMs that just arrived; anything else deserves a
    /// warning in the trace.
    pub skipped_no_sample: Vec<VmId>,
}

/// Runs one decision interval of the shared-memory algorithm: settle
/// benefit updates from the previous epoch's remaps, detect deviating
/// VMs, and remap them away from their interferers. A step with an empty
/// affected list changes nothing.
#[allow(clippy::too_many_arguments)]
pub fn step(
    m: &mut MappingState,
    live: &BTreeMap<VmId, VmSpec>,
    samples: &BTreeMap<VmId, f64>,
    cfg: &AlgoConfig,
    t: &Topology,
    cm: &ClassMatrix,
    bm: &mut BenefitMatrix,
    pending: &mut Vec<PendingBenefitUpdate>,
) -> StepOutcome {
    let mut outcome = StepOutcome::default();

    for update in pending.drain(..) {
        if let Some(&p_after) = samples.get(&update.vm) {
            if let Some(spec) = live.get(&update.vm) {
                update_benefit_matrix(
                    bm,
                    spec.class,
                    update.level,
                    update.p_before,
                    p_after,
                    cfg.benefit_eta,
                );
            }
        }
    }

    let (affected, skipped) = detect_affected(live, samples, cfg);
    outcome.skipped_no_sample = skipped;
    if affected.is_empty() {
        outcome.affected = affected;
        return outcome;
    }

    let (actions, new_pending) = compute_remap(&affected, m, t, cm, bm, live, samples, cfg);
    pending.extend(new_pending);
    outcome.actions = actions;
    outcome.affected = affected;
    outcome
}

#[cfg(test)]
mod tests;
