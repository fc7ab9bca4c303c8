//! Baseline mimicking an untuned general-purpose scheduler: arrivals are
//! first-fit from a random offset, vCPUs migrate to random cores every
//! epoch, cores may be overbooked, and memory stays where it was first
//! touched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::topology::{CoreId, Topology};
use crate::workload::{VmId, VmSpec};

use super::{MappingState, PlacementError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanillaParams {
    /// Per-epoch probability that a vCPU is migrated.
    pub migrate_prob: f64,
    /// Maximum vCPUs time-sharing one core.
    pub k_max: u32,
    /// Sigma of the run-persistent placement-luck factor drawn per VM;
    /// models how unpredictable one run's scheduling is relative to the
    /// next.
    pub churn_sigma: f64,
}

impl Default for VanillaParams {
    fn default() -> Self {
        VanillaParams {
            migrate_prob: 0.2,
            k_max: 2,
            churn_sigma: 0.45,
        }
    }
}

/// First-fit placement over cores in id order starting from a random
/// offset: empty cores first, then anything under the overbooking cap.
/// Memory is placed local-first (first touch) and never moves again.
pub fn vanilla_place_arrival(
    vm: &VmSpec,
    m: &mut MappingState,
    t: &Topology,
    rng: &mut impl Rng,
    params: &VanillaParams,
) -> Result<Vec<CoreId>, PlacementError> {
    if m.contains(&vm.id) {
        return Err(PlacementError::AlreadyMapped(vm.id.clone()));
    }
    let n = t.total_cores();
    let start = rng.gen_range(0..n);
    let mut chosen: Vec<CoreId> = Vec::with_capacity(vm.vcpus as usize);
    let mut pending = vec![0u32; n];
    for max_occ in [0, params.k_max.saturating_sub(1)] {
        for i in 0..n {
            if chosen.len() == vm.vcpus as usize {
                break;
            }
            let core = CoreId((start + i) % n);
            if m.occupancy(core) + pending[core.0] <= max_occ {
                pending[core.0] += 1;
                chosen.push(core);
            }
        }
    }
    if chosen.len() < vm.vcpus as usize {
        return Err(PlacementError::InsufficientCores {
            needed: vm.vcpus,
            free: chosen.len() as u32,
        });
    }
    m.assign(vm.id.clone(), chosen.clone());
    m.place_memory_local_first(&vm.id, vm.memory, t, false)?;
    Ok(chosen)
}

/// One epoch of scheduler churn: each vCPU independently migrates with
/// probability `migrate_prob` to a core under the overbooking cap, chosen
/// with weight proportional to the core's free share. Memory never moves.
pub fn vanilla_step(
    m: &mut MappingState,
    t: &Topology,
    rng: &mut impl Rng,
    params: &VanillaParams,
) {
    if params.migrate_prob <= 0.0 {
        return;
    }
    let vms: Vec<VmId> = m.vm_ids().cloned().collect();
    for vm in vms {
        let count = m.cores_of(&vm).map_or(0, |c| c.len());
        for idx in 0..count {
            if !rng.gen_bool(params.migrate_prob) {
                continue;
            }
            let current = m.cores_of(&vm).expect("mapped")[idx];
            let dest = pick_weighted(m, t, rng, params, current);
            if dest != current {
                m.move_vcpu(&vm, idx, dest);
            }
        }
    }
}

/// Weighted choice among cores with spare capacity, the vCPU's own core
/// included (its slot freed first).
fn pick_weighted(
    m: &MappingState,
    t: &Topology,
    rng: &mut impl Rng,
    params: &VanillaParams,
    current: CoreId,
) -> CoreId {
    let n = t.total_cores();
    let mut total: u64 = 0;
    let mut weights = vec![0u32; n];
    for i in 0..n {
        let mut occ = m.occupancy(CoreId(i));
        if i == current.0 {
            occ -= 1;
        }
        if occ < params.k_max {
            weights[i] = params.k_max - occ;
            total += weights[i] as u64;
        }
    }
    debug_assert!(total > 0, "own core always has spare capacity");
    let mut pick = rng.gen_range(0..total);
    for i in 0..n {
        let w = weights[i] as u64;
        if pick < w {
            return CoreId(i);
        }
        pick -= w;
    }
    current
}
