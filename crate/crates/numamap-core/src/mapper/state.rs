//! Global assignment of vCPUs to physical cores and VM memory to NUMA
//! nodes, with the bookkeeping the placement rules need: per-core
//! occupancy, per-node allocation, and memory reserved for co-hosted
//! small VMs.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::topology::{CoreId, NumaNodeId, Topology};
use crate::workload::VmId;

use super::PlacementError;

/// Free cores and free memory of one NUMA node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NodeCapacity {
    pub node: NumaNodeId,
    pub free_cores: u32,
    /// Capacity minus allocations and reservations (both static and the
    /// runtime small-VM reservations).
    pub free_memory: u64,
}

/// Assignment of vCPUs to cores and memory to NUMA nodes for all live VMs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MappingState {
    vcpu_assign: BTreeMap<VmId, Vec<CoreId>>,
    mem_alloc: BTreeMap<VmId, BTreeMap<NumaNodeId, u64>>,
    /// Memory earmarked for smaller co-tenants on nodes where a
    /// memory-heavy VM was capped to its core-proportional share.
    /// Overflow from other nodes may not claim it; VMs with vCPUs on the
    /// node may.
    reserved_small: Vec<u64>,
    core_vcpus: Vec<u32>,
    node_allocated: Vec<u64>,
    epoch: u64,
}

impl MappingState {
    pub fn new(t: &Topology) -> Self {
        MappingState {
            vcpu_assign: BTreeMap::new(),
            mem_alloc: BTreeMap::new(),
            reserved_small: vec![0; t.total_numa_nodes()],
            core_vcpus: vec![0; t.total_cores()],
            node_allocated: vec![0; t.total_numa_nodes()],
            epoch: 0,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn contains(&self, vm: &VmId) -> bool {
        self.vcpu_assign.contains_key(vm)
    }

    pub fn vm_ids(&self) -> impl Iterator<Item = &VmId> {
        self.vcpu_assign.keys()
    }

    pub fn cores_of(&self, vm: &VmId) -> Option<&[CoreId]> {
        self.vcpu_assign.get(vm).map(|v| v.as_slice())
    }

    pub fn memory_of(&self, vm: &VmId) -> Option<&BTreeMap<NumaNodeId, u64>> {
        self.mem_alloc.get(vm)
    }

    /// Number of vCPUs currently assigned to a core.
    pub fn occupancy(&self, core: CoreId) -> u32 {
        self.core_vcpus[core.0]
    }

    pub fn total_vcpus(&self) -> u32 {
        self.core_vcpus.iter().sum()
    }

    pub fn allocated_on(&self, node: NumaNodeId) -> u64 {
        self.node_allocated[node.0]
    }

    pub fn reserved_small_on(&self, node: NumaNodeId) -> u64 {
        self.reserved_small[node.0]
    }

    /// vCPU count of `vm` per NUMA node.
    pub fn node_spread(&self, vm: &VmId, t: &Topology) -> BTreeMap<NumaNodeId, u32> {
        let mut spread = BTreeMap::new();
        if let Some(cores) = self.cores_of(vm) {
            for core in cores {
                *spread.entry(t.node_of_core(*core)).or_insert(0) += 1;
            }
        }
        spread
    }

    /// Distinct VMs with at least one vCPU in each LLC group, in VM id
    /// order within each group.
    pub fn llc_residents(&self, t: &Topology) -> Vec<Vec<VmId>> {
        let mut residents: Vec<Vec<VmId>> = vec![Vec::new(); t.llc_groups().len()];
        for (vm, cores) in &self.vcpu_assign {
            let groups: std::collections::BTreeSet<usize> =
                cores.iter().map(|c| t.llc_group_of(*c)).collect();
            for g in groups {
                residents[g].push(vm.clone());
            }
        }
        residents
    }

    /// Free cores (zero assigned vCPUs) per node, in node id order.
    pub fn free_cores_by_node(&self, t: &Topology) -> Vec<u32> {
        t.numa_nodes()
            .map(|n| n.cores.iter().filter(|c| self.occupancy(**c) == 0).count() as u32)
            .collect()
    }

    /// Memory that overflow allocations from other nodes may still claim.
    pub fn unreserved_free_memory(&self, node: NumaNodeId, t: &Topology) -> u64 {
        let n = t.numa_node(node).expect("valid node id");
        n.memory_capacity
            .saturating_sub(n.memory_reserved)
            .saturating_sub(self.node_allocated[node.0])
            .saturating_sub(self.reserved_small[node.0])
    }

    /// Memory a VM with vCPUs on `node` may claim: the unreserved pool
    /// plus the small-VM reservation it is entitled to.
    pub fn local_free_memory(&self, node: NumaNodeId, t: &Topology) -> u64 {
        let n = t.numa_node(node).expect("valid node id");
        n.memory_capacity
            .saturating_sub(n.memory_reserved)
            .saturating_sub(self.node_allocated[node.0])
    }

    /// Per-node free cores and free memory.
    pub fn free_capacity(&self, t: &Topology) -> Vec<NodeCapacity> {
        let free_cores = self.free_cores_by_node(t);
        t.numa_nodes()
            .map(|n| NodeCapacity {
                node: n.id,
                free_cores: free_cores[n.id.0],
                free_memory: self.unreserved_free_memory(n.id, t),
            })
            .collect()
    }

    /// Assigns (or re-assigns) a VM's vCPUs. Memory is untouched.
    pub fn assign(&mut self, vm: VmId, cores: Vec<CoreId>) {
        if let Some(old) = self.vcpu_assign.remove(&vm) {
            for c in old {
                self.core_vcpus[c.0] -= 1;
            }
        }
        for c in &cores {
            self.core_vcpus[c.0] += 1;
        }
        self.vcpu_assign.insert(vm, cores);
    }

    /// Reassigns a single vCPU to another core.
    pub fn move_vcpu(&mut self, vm: &VmId, vcpu_index: usize, core: CoreId) {
        let cores = self.vcpu_assign.get_mut(vm).expect("vm is mapped");
        let old = cores[vcpu_index];
        cores[vcpu_index] = core;
        self.core_vcpus[old.0] -= 1;
        self.core_vcpus[core.0] += 1;
    }

    /// Removes a VM's vCPU assignment, keeping its memory in place.
    pub fn unassign(&mut self, vm: &VmId) -> Option<Vec<CoreId>> {
        let old = self.vcpu_assign.remove(vm)?;
        for c in &old {
            self.core_vcpus[c.0] -= 1;
        }
        Some(old)
    }

    /// Records raw memory placements, bypassing the local-first policy.
    /// For the placement oracle and for tests that pin memory by hand;
    /// the caller is responsible for capacity.
    pub fn record_memory(&mut self, vm: &VmId, takes: &[(NumaNodeId, u64)]) {
        for (node, bytes) in takes {
            if *bytes == 0 {
                continue;
            }
            *self
                .mem_alloc
                .entry(vm.clone())
                .or_default()
                .entry(*node)
                .or_insert(0) += bytes;
            self.node_allocated[node.0] += bytes;
        }
    }

    /// Frees everything a departed VM held. Reservations it caused stay
    /// earmarked but are clamped to the remaining free memory.
    pub fn free_vm(&mut self, vm: &VmId, t: &Topology) {
        self.unassign(vm);
        if let Some(allocs) = self.mem_alloc.remove(vm) {
            for (node, bytes) in allocs {
                self.node_allocated[node.0] -= bytes;
            }
        }
        for node in t.numa_nodes() {
            let free = node
                .memory_capacity
                .saturating_sub(node.memory_reserved)
                .saturating_sub(self.node_allocated[node.id.0]);
            self.reserved_small[node.id.0] = self.reserved_small[node.id.0].min(free);
        }
    }

    /// Places a VM's memory local-first onto the nodes hosting its vCPUs,
    /// overflowing to the nearest other nodes by NUMA distance.
    ///
    /// With `reserve_for_small`, a VM that leaves free cores on a node is
    /// capped at its core-proportional share of that node's memory and the
    /// remainder is earmarked for smaller co-tenants.
    pub fn place_memory_local_first(
        &mut self,
        vm: &VmId,
        demand: u64,
        t: &Topology,
        reserve_for_small: bool,
    ) -> Result<(), PlacementError> {
        let spread = self.node_spread(vm, t);
        let plan = plan_memory(self, &spread, demand, t, reserve_for_small)?;
        self.apply_memory_plan(vm, &plan);
        Ok(())
    }

    pub(crate) fn apply_memory_plan(&mut self, vm: &VmId, plan: &MemoryPlan) {
        for take in &plan.takes {
            if take.bytes == 0 {
                continue;
            }
            *self
                .mem_alloc
                .entry(vm.clone())
                .or_default()
                .entry(take.node)
                .or_insert(0) += take.bytes;
            self.node_allocated[take.node.0] += take.bytes;
            let r = &mut self.reserved_small[take.node.0];
            *r -= take.from_reserved.min(*r);
        }
        for (node, bytes) in &plan.new_reservations {
            self.reserved_small[node.0] = *bytes;
        }
    }

    /// Internal consistency check used by tests: cached counters match
    /// the assignment maps.
    #[cfg(test)]
    pub(crate) fn assert_consistent(&self, t: &Topology) {
        let mut counts = vec![0u32; t.total_cores()];
        for cores in self.vcpu_assign.values() {
            for c in cores {
                counts[c.0] += 1;
            }
        }
        assert_eq!(counts, self.core_vcpus);
        let mut alloc = vec![0u64; t.total_numa_nodes()];
        for per_node in self.mem_alloc.values() {
            for (node, bytes) in per_node {
                alloc[node.0] += bytes;
            }
        }
        assert_eq!(alloc, self.node_allocated);
        for node in t.numa_nodes() {
            assert!(
                alloc[node.id.0] + node.memory_reserved <= node.memory_capacity,
                "node {} over-allocated",
                node.id
            );
        }
    }
}

/// One node's share of a memory placement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct MemoryTake {
    pub node: NumaNodeId,
    pub bytes: u64,
    /// Portion drawn from the node's small-VM reservation.
    pub from_reserved: u64,
}

/// A computed, not-yet-applied memory placement.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub(crate) struct MemoryPlan {
    pub takes: Vec<MemoryTake>,
    /// Nodes whose remaining free memory becomes reserved for small VMs.
    pub new_reservations: Vec<(NumaNodeId, u64)>,
}

impl MemoryPlan {
    /// Memory-weighted mean NUMA distance from the given vCPU spread to
    /// the planned pages.
    pub fn mean_distance(&self, spread: &BTreeMap<NumaNodeId, u32>, t: &Topology) -> f64 {
        let vcpus: u32 = spread.values().sum();
        let bytes: u64 = self.takes.iter().map(|t| t.bytes).sum();
        if vcpus == 0 || bytes == 0 {
            return t.distance.local() as f64;
        }
        let mut acc = 0.0;
        for (node, count) in spread {
            for take in &self.takes {
                acc += *count as f64
                    * take.bytes as f64
                    * t.distance.get(*node, take.node) as f64;
            }
        }
        acc / (vcpus as f64 * bytes as f64)
    }
}

/// Computes a local-first memory placement for `demand` bytes against the
/// current state, without mutating it.
pub(crate) fn plan_memory(
    m: &MappingState,
    spread: &BTreeMap<NumaNodeId, u32>,
    demand: u64,
    t: &Topology,
    reserve_for_small: bool,
) -> Result<MemoryPlan, PlacementError> {
    let mut plan = MemoryPlan::default();
    let mut remaining = demand;

    // Local phase: nodes hosting vCPUs, in node id order. These draws may
    // consume the small-VM reservation pool.
    for (&node, &count) in spread {
        if remaining == 0 {
            break;
        }
        let info = t.numa_node(node).expect("valid node id");
        let avail = m.local_free_memory(node, t);
        let cap = if reserve_for_small && (count as usize) < info.cores.len() {
            (info.memory_capacity as u128 * count as u128 / info.cores.len() as u128) as u64
        } else {
            u64::MAX
        };
        let take = remaining.min(avail).min(cap);
        if take > 0 {
            let unreserved = m.unreserved_free_memory(node, t);
            let from_reserved = take.saturating_sub(unreserved);
            plan.takes.push(MemoryTake {
                node,
                bytes: take,
                from_reserved,
            });
            remaining -= take;
        }
        // The cap bound while free memory was left over: earmark the rest
        // of the node for smaller co-tenants.
        if reserve_for_small && remaining > 0 && take == cap && avail > cap {
            plan.new_reservations.push((node, avail - cap));
        }
    }

    // Overflow phase: nearest other nodes by vCPU-weighted distance, then
    // id. Reservations are off limits here.
    if remaining > 0 {
        let vcpus: u32 = spread.values().sum::<u32>().max(1);
        let mut others: Vec<(f64, NumaNodeId)> = t
            .numa_nodes()
            .filter(|n| !spread.contains_key(&n.id))
            .map(|n| {
                let d = spread
                    .iter()
                    .map(|(host, count)| *count as f64 * t.distance.get(*host, n.id) as f64)
                    .sum::<f64>()
                    / vcpus as f64;
                (d, n.id)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, node) in others {
            if remaining == 0 {
                break;
            }
            let take = remaining.min(m.unreserved_free_memory(node, t));
            if take > 0 {
                plan.takes.push(MemoryTake {
                    node,
                    bytes: take,
                    from_reserved: 0,
                });
                remaining -= take;
            }
        }
    }

    if remaining > 0 {
        return Err(PlacementError::InsufficientMemory {
            demand,
            short_by: remaining,
        });
    }
    Ok(plan)
}
