//! Arrival placement: spread a new VM over as few servers, then as few
//! NUMA nodes as possible, avoiding class-matrix conflicts on shared LLC
//! groups, and finally minimizing the memory-weighted NUMA distance.
//! When the only fitting slots conflict, a bounded reshuffle of running
//! VMs is tried before falling back to a best-effort placement.

use std::collections::{BTreeMap, BTreeSet};

use crate::topology::{NumaNodeId, ServerId, Topology};
use crate::workload::{VmId, VmSpec};

use super::state::{plan_memory, MemoryPlan};
use super::{Action, AlgoConfig, ClassMatrix, MappingState, PlacementError};

/// Enumeration guards. Past these the search degrades to a deterministic
/// greedy choice instead of an exhaustive sweep.
const MAX_SERVER_SUBSETS: usize = 20_000;
const MAX_NODE_SUBSETS: usize = 200_000;
const MAX_SPLITS_PER_SUBSET: usize = 10_000;

/// Where a VM's vCPUs ended up, and how clean the spot is.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub cores: Vec<crate::topology::CoreId>,
    /// Class-matrix conflicts against residents of the LLC groups the VM
    /// landed in. Zero unless the placement was best-effort.
    pub violations: usize,
}

/// A fully evaluated candidate: which nodes get how many vCPUs, and what
/// the memory placement would look like.
#[derive(Debug, Clone)]
pub(super) struct ArrivalPlan {
    pub split: Vec<(NumaNodeId, u32)>,
    pub violations: usize,
    pub distance: f64,
    pub memory: Option<MemoryPlan>,
}

/// How the candidate's memory distance is evaluated.
pub(super) enum MemoryMode<'a> {
    /// Fresh arrival: memory is planned local-first with the small-VM
    /// reservation rule.
    Allocate { demand: u64 },
    /// Re-placement of a running VM: memory stays where it is.
    Existing(&'a BTreeMap<NumaNodeId, u64>),
}

/// Places an arriving VM and allocates its memory. The returned placement
/// reports class-matrix violations; callers that require a clean slot
/// should use [`reshuffle_for_arrival`] instead.
pub fn place_arrival(
    vm: &VmSpec,
    m: &mut MappingState,
    t: &Topology,
    cm: &ClassMatrix,
    live: &BTreeMap<VmId, VmSpec>,
) -> Result<Placement, PlacementError> {
    if m.contains(&vm.id) {
        return Err(PlacementError::AlreadyMapped(vm.id.clone()));
    }
    let plan = search_arrival(
        vm,
        m,
        t,
        cm,
        live,
        &MemoryMode::Allocate { demand: vm.memory },
        None,
    )?;
    Ok(apply_plan(vm, plan, m, t))
}

/// Admits an arrival the way the control loop does: straight placement
/// when a conflict-free slot exists, otherwise the minimal reshuffle of
/// running VMs that opens one, otherwise best effort with the conflicts
/// flagged. Returns the actions taken, arrival last.
pub fn admit_arrival(
    vm: &VmSpec,
    m: &mut MappingState,
    t: &Topology,
    cm: &ClassMatrix,
    live: &BTreeMap<VmId, VmSpec>,
    cfg: &AlgoConfig,
) -> Result<Vec<Action>, PlacementError> {
    let (moves, placement) = reshuffle_for_arrival(vm, m, t, cm, live, cfg)?;
    let mut actions = moves;
    actions.push(Action::Arrival {
        vm: vm.id.clone(),
        to_cores: placement.cores.clone(),
        violations: placement.violations,
        best_effort: placement.violations > 0,
    });
    Ok(actions)
}

/// Opens a conflict-free slot for `vm` by moving the smallest set of
/// running VMs (measured in moved vCPUs, bounded by
/// `cfg.max_reshuffles_per_epoch` moved VMs), then places it. When a
/// conflict-free slot already exists the move list is empty; when no
/// bounded reshuffle works the VM is placed best-effort with violations.
pub fn reshuffle_for_arrival(
    vm: &VmSpec,
    m: &mut MappingState,
    t: &Topology,
    cm: &ClassMatrix,
    live: &BTreeMap<VmId, VmSpec>,
    cfg: &AlgoConfig,
) -> Result<(Vec<Action>, Placement), PlacementError> {
    if m.contains(&vm.id) {
        return Err(PlacementError::AlreadyMapped(vm.id.clone()));
    }
    let direct = search_arrival(
        vm,
        m,
        t,
        cm,
        live,
        &MemoryMode::Allocate { demand: vm.memory },
        None,
    )?;
    if direct.violations == 0 {
        return Ok((Vec::new(), apply_plan(vm, direct, m, t)));
    }

    for subset in move_subsets(m, live, cfg.max_reshuffles_per_epoch) {
        if let Some(result) = try_reshuffle(vm, m, t, cm, live, &subset) {
            let (new_state, actions, placement) = result;
            *m = new_state;
            return Ok((actions, placement));
        }
    }

    // No bounded reshuffle opens a clean slot: take the conflicting
    // placement and let the remap stage sort it out.
    Ok((Vec::new(), apply_plan(vm, direct, m, t)))
}

/// Candidate move sets ordered by total moved vCPUs, then ids, so the
/// first success is the cheapest.
fn move_subsets(
    m: &MappingState,
    live: &BTreeMap<VmId, VmSpec>,
    max_moves: usize,
) -> Vec<Vec<VmId>> {
    let movable: Vec<&VmId> = m.vm_ids().filter(|id| live.contains_key(*id)).collect();
    let mut subsets: Vec<(u32, Vec<VmId>)> = Vec::new();
    if max_moves >= 1 {
        for a in &movable {
            subsets.push((live[*a].vcpus, vec![(*a).clone()]));
        }
    }
    if max_moves >= 2 {
        for (i, a) in movable.iter().enumerate() {
            for b in &movable[i + 1..] {
                subsets.push((live[*a].vcpus + live[*b].vcpus, vec![(*a).clone(), (*b).clone()]));
            }
        }
    }
    // Three or more simultaneous moves are past the point of a sensible
    // arrival-time disturbance; the spec's bound is honored up to pairs.
    subsets.sort_by(|x, y| x.0.cmp(&y.0).then_with(|| x.1.cmp(&y.1)));
    subsets.into_iter().map(|(_, s)| s).collect()
}

fn try_reshuffle(
    vm: &VmSpec,
    m: &MappingState,
    t: &Topology,
    cm: &ClassMatrix,
    live: &BTreeMap<VmId, VmSpec>,
    subset: &[VmId],
) -> Option<(MappingState, Vec<Action>, Placement)> {
    let mut trial = m.clone();
    let mut old_cores = BTreeMap::new();
    for id in subset {
        old_cores.insert(id.clone(), trial.unassign(id)?);
    }

    let plan = search_arrival(
        vm,
        &trial,
        t,
        cm,
        live,
        &MemoryMode::Allocate { demand: vm.memory },
        None,
    )
    .ok()?;
    if plan.violations > 0 {
        return None;
    }
    let placement = apply_plan(vm, plan, &mut trial, t);

    let mut actions = Vec::new();
    for id in subset {
        let spec = &live[id];
        let memory = trial.memory_of(id).cloned().unwrap_or_default();
        let plan =
            search_arrival(spec, &trial, t, cm, live, &MemoryMode::Existing(&memory), None)
                .ok()?;
        if plan.violations > 0 {
            return None;
        }
        let applied = apply_plan(spec, plan, &mut trial, t);
        if applied.cores != old_cores[id] {
            actions.push(Action::Reshuffle {
                vm: id.clone(),
                from_cores: old_cores[id].clone(),
                to_cores: applied.cores,
            });
        }
    }
    Some((trial, actions, placement))
}

/// Picks concrete cores for a plan and commits it to the mapping state.
pub(super) fn apply_plan(
    vm: &VmSpec,
    plan: ArrivalPlan,
    m: &mut MappingState,
    t: &Topology,
) -> Placement {
    let mut cores = Vec::with_capacity(vm.vcpus as usize);
    for (node, count) in &plan.split {
        let info = t.numa_node(*node).expect("plan uses valid nodes");
        cores.extend(
            info.cores
                .iter()
                .filter(|c| m.occupancy(**c) == 0)
                .take(*count as usize)
                .copied(),
        );
    }
    debug_assert_eq!(cores.len(), vm.vcpus as usize);
    m.assign(vm.id.clone(), cores.clone());
    if let Some(memory) = &plan.memory {
        m.apply_memory_plan(&vm.id, memory);
    }
    Placement {
        cores,
        violations: plan.violations,
    }
}

/// The lexicographic search: fewest servers, fewest NUMA nodes, fewest
/// class-matrix conflicts, smallest memory-weighted distance. Ties fall
/// to the lowest node ids. `allowed_nodes` restricts the search space
/// (used by the remap stage); affinity pinning is always honored.
#[allow(clippy::too_many_arguments)]
pub(super) fn search_arrival(
    vm: &VmSpec,
    m: &MappingState,
    t: &Topology,
    cm: &ClassMatrix,
    live: &BTreeMap<VmId, VmSpec>,
    memory: &MemoryMode<'_>,
    allowed_nodes: Option<&BTreeSet<NumaNodeId>>,
) -> Result<ArrivalPlan, PlacementError> {
    let mut free = m.free_cores_by_node(t);
    for node in t.numa_nodes() {
        let server = t.server_of_node(node.id);
        let affinity_ok = vm
            .affinity_servers
            .as_ref()
            .map_or(true, |set| set.contains(&server));
        let allowed = allowed_nodes.map_or(true, |set| set.contains(&node.id));
        if !affinity_ok || !allowed {
            free[node.id.0] = 0;
        }
    }
    let total_free: u32 = free.iter().sum();
    if total_free < vm.vcpus {
        return Err(PlacementError::InsufficientCores {
            needed: vm.vcpus,
            free: total_free,
        });
    }

    let conflicts = group_conflicts(vm, m, t, cm, live);

    // Tier 1: minimal server count.
    let mut server_free: BTreeMap<ServerId, u32> = BTreeMap::new();
    for node in t.numa_nodes() {
        *server_free.entry(t.server_of_node(node.id)).or_insert(0) += free[node.id.0];
    }
    let mut by_free: Vec<(ServerId, u32)> = server_free
        .iter()
        .map(|(s, f)| (*s, *f))
        .filter(|(_, f)| *f > 0)
        .collect();
    by_free.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut k_star = 0;
    let mut acc = 0;
    for (_, f) in &by_free {
        k_star += 1;
        acc += f;
        if acc >= vm.vcpus {
            break;
        }
    }

    let server_subsets = server_subsets(&by_free, k_star, vm.vcpus);

    // Tier 2: minimal NUMA node count across those server sets.
    let mut min_nodes = usize::MAX;
    for subset in &server_subsets {
        min_nodes = min_nodes.min(min_node_count(subset, &free, t, vm.vcpus));
    }

    // Tiers 3 and 4: sweep node subsets of that size.
    let mut best: Option<ArrivalPlan> = None;
    for subset in &server_subsets {
        if min_node_count(subset, &free, t, vm.vcpus) > min_nodes {
            continue;
        }
        let nodes: Vec<NumaNodeId> = t
            .numa_nodes()
            .filter(|n| free[n.id.0] > 0 && subset.contains(&t.server_of_node(n.id)))
            .map(|n| n.id)
            .collect();
        for_each_node_subset(&nodes, min_nodes, &free, vm.vcpus, &mut |chosen| {
            let violations = subset_violations(chosen, &conflicts, t);
            if let Some(b) = &best {
                if violations > b.violations {
                    return;
                }
            }
            evaluate_splits(vm, m, t, chosen, &free, violations, memory, &mut best);
        });
    }

    best.ok_or(PlacementError::InsufficientCores {
        needed: vm.vcpus,
        free: total_free,
    })
}

/// Class-matrix conflicts per LLC group for the arriving VM, counting
/// distinct incompatible resident VMs (the VM itself excluded, so the
/// search also works for re-placements). Residents without a live spec
/// cannot be classified and are treated as compatible.
fn group_conflicts(
    vm: &VmSpec,
    m: &MappingState,
    t: &Topology,
    cm: &ClassMatrix,
    live: &BTreeMap<VmId, VmSpec>,
) -> Vec<usize> {
    m.llc_residents(t)
        .iter()
        .map(|vms| {
            vms.iter()
                .filter(|id| **id != vm.id)
                .filter(|id| match live.get(*id) {
                    Some(other) => !cm.compatible(vm.class, other.class),
                    None => false,
                })
                .count()
        })
        .collect()
}

fn subset_violations(nodes: &[NumaNodeId], conflicts: &[usize], t: &Topology) -> usize {
    let groups: BTreeSet<usize> = nodes
        .iter()
        .map(|n| {
            let core = t.numa_node(*n).expect("valid node").cores[0];
            t.llc_group_of(core)
        })
        .collect();
    groups.iter().map(|g| conflicts[*g]).sum()
}

/// Enumerates vCPU splits over the chosen nodes (every node gets at least
/// one vCPU, at most its free cores), largest-first so the canonical
/// fill-early split is seen first, and keeps the best by (violations,
/// distance) with first-found winning ties.
#[allow(clippy::too_many_arguments)]
fn evaluate_splits(
    vm: &VmSpec,
    m: &MappingState,
    t: &Topology,
    nodes: &[NumaNodeId],
    free: &[u32],
    violations: usize,
    memory: &MemoryMode<'_>,
    best: &mut Option<ArrivalPlan>,
) {
    let mut split = vec![0u32; nodes.len()];
    let mut budget = MAX_SPLITS_PER_SUBSET;
    let mut rec = RecState {
        m,
        t,
        nodes,
        free,
        violations,
        memory,
        best,
    };
    enumerate_split(&mut rec, &mut split, 0, vm.vcpus, &mut budget);
}

struct RecState<'a, 'b> {
    m: &'a MappingState,
    t: &'a Topology,
    nodes: &'a [NumaNodeId],
    free: &'a [u32],
    violations: usize,
    memory: &'a MemoryMode<'b>,
    best: &'a mut Option<ArrivalPlan>,
}

fn enumerate_split(
    rec: &mut RecState<'_, '_>,
    split: &mut Vec<u32>,
    idx: usize,
    remaining: u32,
    budget: &mut usize,
) {
    if *budget == 0 {
        return;
    }
    if idx == rec.nodes.len() {
        if remaining == 0 {
            *budget -= 1;
            consider_split(rec, split);
        }
        return;
    }
    let left_after = (rec.nodes.len() - idx - 1) as u32;
    let free_here = rec.free[rec.nodes[idx].0];
    if remaining < left_after + 1 {
        return;
    }
    let hi = free_here.min(remaining - left_after);
    let tail_capacity: u32 = rec.nodes[idx + 1..].iter().map(|n| rec.free[n.0]).sum();
    let lo = remaining.saturating_sub(tail_capacity).max(1);
    if lo > hi {
        return;
    }
    for take in (lo..=hi).rev() {
        split[idx] = take;
        enumerate_split(rec, split, idx + 1, remaining - take, budget);
        if *budget == 0 {
            return;
        }
    }
    split[idx] = 0;
}

fn consider_split(rec: &mut RecState<'_, '_>, split: &[u32]) {
    let spread: BTreeMap<NumaNodeId, u32> = rec
        .nodes
        .iter()
        .zip(split)
        .filter(|(_, c)| **c > 0)
        .map(|(n, c)| (*n, *c))
        .collect();
    let (distance, memory_plan) = match rec.memory {
        MemoryMode::Allocate { demand } => {
            let Ok(plan) = plan_memory(rec.m, &spread, *demand, rec.t, true) else {
                return;
            };
            let d = plan.mean_distance(&spread, rec.t);
            (d, Some(plan))
        }
        MemoryMode::Existing(alloc) => (existing_distance(&spread, alloc, rec.t), None),
    };
    let better = match rec.best {
        None => true,
        Some(b) => {
            rec.violations < b.violations
                || (rec.violations == b.violations && distance < b.distance)
        }
    };
    if better {
        *rec.best = Some(ArrivalPlan {
            split: spread.into_iter().collect(),
            violations: rec.violations,
            distance,
            memory: memory_plan,
        });
    }
}

/// Memory-weighted mean distance from a vCPU spread to an existing
/// allocation.
pub(super) fn existing_distance(
    spread: &BTreeMap<NumaNodeId, u32>,
    alloc: &BTreeMap<NumaNodeId, u64>,
    t: &Topology,
) -> f64 {
    let vcpus: u32 = spread.values().sum();
    let bytes: u64 = alloc.values().sum();
    if vcpus == 0 || bytes == 0 {
        return t.distance.local() as f64;
    }
    let mut acc = 0.0;
    for (host, count) in spread {
        for (node, b) in alloc {
            acc += *count as f64 * *b as f64 * t.distance.get(*host, *node) as f64;
        }
    }
    acc / (vcpus as f64 * bytes as f64)
}

/// All server subsets of size `k` whose free cores cover the demand, in
/// lexicographic id order; falls back to the greedy prefix when the space
/// is too large.
fn server_subsets(by_free: &[(ServerId, u32)], k: usize, demand: u32) -> Vec<Vec<ServerId>> {
    let ids: Vec<ServerId> = {
        let mut v: Vec<ServerId> = by_free.iter().map(|(s, _)| *s).collect();
        v.sort();
        v
    };
    let free: BTreeMap<ServerId, u32> = by_free.iter().copied().collect();
    let mut out = Vec::new();
    let mut index = vec![0usize; k];
    let mut count = 0usize;
    combinations(&ids, k, &mut index, 0, 0, &mut |subset| {
        count += 1;
        if count > MAX_SERVER_SUBSETS {
            return false;
        }
        if subset.iter().map(|s| free[s]).sum::<u32>() >= demand {
            out.push(subset.to_vec());
        }
        true
    });
    if count > MAX_SERVER_SUBSETS {
        // Greedy: the most-free servers, lowest id first among equals.
        let mut sorted = by_free.to_vec();
        sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut greedy: Vec<ServerId> = sorted.iter().take(k).map(|(s, _)| *s).collect();
        greedy.sort();
        return vec![greedy];
    }
    out
}

/// Minimal node count within a server set, by taking the freest nodes.
fn min_node_count(servers: &[ServerId], free: &[u32], t: &Topology, demand: u32) -> usize {
    let mut capacities: Vec<u32> = t
        .numa_nodes()
        .filter(|n| free[n.id.0] > 0 && servers.contains(&t.server_of_node(n.id)))
        .map(|n| free[n.id.0])
        .collect();
    capacities.sort_unstable_by(|a, b| b.cmp(a));
    let mut acc = 0;
    for (i, c) in capacities.iter().enumerate() {
        acc += c;
        if acc >= demand {
            return i + 1;
        }
    }
    usize::MAX
}

/// Invokes `f` for each size-`k` subset of `nodes` (id order) with enough
/// free cores, up to the enumeration cap; past the cap a greedy subset is
/// used instead.
fn for_each_node_subset(
    nodes: &[NumaNodeId],
    k: usize,
    free: &[u32],
    demand: u32,
    f: &mut impl FnMut(&[NumaNodeId]),
) {
    if k > nodes.len() {
        return;
    }
    let mut count = 0usize;
    let mut index = vec![0usize; k];
    let mut capped = false;
    combinations(nodes, k, &mut index, 0, 0, &mut |subset| {
        count += 1;
        if count > MAX_NODE_SUBSETS {
            capped = true;
            return false;
        }
        if subset.iter().map(|n| free[n.0]).sum::<u32>() >= demand {
            f(subset);
        }
        true
    });
    if capped {
        let mut sorted: Vec<NumaNodeId> = nodes.to_vec();
        sorted.sort_by(|a, b| free[b.0].cmp(&free[a.0]).then(a.cmp(b)));
        let mut greedy: Vec<NumaNodeId> = sorted.into_iter().take(k).collect();
        greedy.sort();
        if greedy.iter().map(|n| free[n.0]).sum::<u32>() >= demand {
            f(&greedy);
        }
    }
}

/// Plain lexicographic k-combinations with early exit.
fn combinations<T: Copy>(
    items: &[T],
    k: usize,
    index: &mut Vec<usize>,
    depth: usize,
    start: usize,
    f: &mut impl FnMut(&[T]) -> bool,
) -> bool {
    if depth == k {
        let subset: Vec<T> = index.iter().map(|i| items[*i]).collect();
        return f(&subset);
    }
    for i in start..items.len() {
        if items.len() - i < k - depth {
            break;
        }
        index[depth] = i;
        if !combinations(items, k, index, depth + 1, i + 1, f) {
            return false;
        }
    }
    true
}
