//! Deviation-driven remapping: move an affected VM away from its worst
//! interferer at the cheapest separation level that pays for itself.
//!
//! Candidates are generated at three levels relative to the interferer,
//! from weakest to strongest: out of its LLC groups (but possibly still
//! on the same socket), out of its sockets, and out of its servers. A
//! candidate keeps as many vCPUs in place as the level allows and fills
//! the rest with free cores closest to the VM's memory. Each candidate is
//! scored `benefit[class][achieved level] − λ · moved vCPUs`; anything
//! that does not beat staying put is dropped. Destination LLC groups may
//! only contain VMs from the affected VM's neighbor list, so a remap can
//! never create a new class conflict. Memory never moves.

use std::collections::{BTreeMap, BTreeSet};

use crate::topology::{CoreId, NumaNodeId, ServerId, SocketId, Topology};
use crate::workload::{VmId, VmSpec};

use super::placement::existing_distance;
use super::{
    build_neighbor_list, Action, AffectedList, AlgoConfig, BenefitMatrix, ClassMatrix,
    MappingState, PendingBenefitUpdate, SeparationLevel,
};

/// Applies the best admissible remap for each affected VM in order,
/// returning the actions taken and the benefit-matrix updates to settle
/// next epoch. VMs without an admissible candidate stay in place.
#[allow(clippy::too_many_arguments)]
pub fn compute_remap(
    affected: &AffectedList,
    m: &mut MappingState,
    t: &Topology,
    cm: &ClassMatrix,
    bm: &BenefitMatrix,
    live: &BTreeMap<VmId, VmSpec>,
    samples: &BTreeMap<VmId, f64>,
    cfg: &AlgoConfig,
) -> (Vec<Action>, Vec<PendingBenefitUpdate>) {
    let mut actions = Vec::new();
    let mut pending = Vec::new();

    for (vm_id, _deviation) in &affected.entries {
        let Some(spec) = live.get(vm_id) else { continue };
        if !m.contains(vm_id) {
            continue;
        }
        let neighbors = build_neighbor_list(spec, live, cm, t);
        let Some(interferer) = worst_interferer(vm_id, m, t, live) else {
            continue;
        };
        let Some(candidate) = best_candidate(spec, &interferer, &neighbors, m, t, bm, cfg) else {
            continue;
        };

        let from_cores = m.cores_of(vm_id).expect("vm is mapped").to_vec();
        m.assign(vm_id.clone(), candidate.cores.clone());
        if let Some(&p_before) = samples.get(vm_id) {
            pending.push(PendingBenefitUpdate {
                vm: vm_id.clone(),
                level: candidate.level,
                p_before,
            });
        }
        actions.push(Action::Remap {
            vm: vm_id.clone(),
            from_cores,
            to_cores: candidate.cores,
            level: candidate.level,
            score: candidate.score,
        });
    }
    (actions, pending)
}

/// The co-located VM with the most damaging class, ties to the lowest id.
fn worst_interferer(
    vm: &VmId,
    m: &MappingState,
    t: &Topology,
    live: &BTreeMap<VmId, VmSpec>,
) -> Option<VmId> {
    let residents = m.llc_residents(t);
    let own_groups: BTreeSet<usize> = m
        .cores_of(vm)?
        .iter()
        .map(|c| t.llc_group_of(*c))
        .collect();
    let mut co_located: Vec<&VmId> = own_groups
        .iter()
        .flat_map(|g| residents[*g].iter())
        .filter(|id| *id != vm && live.contains_key(*id))
        .collect();
    co_located.sort();
    co_located.dedup();
    co_located
        .into_iter()
        .max_by_key(|id| (live[*id].class.damage_rank(), std::cmp::Reverse((*id).clone())))
        .cloned()
}

#[derive(Debug)]
struct Candidate {
    cores: Vec<CoreId>,
    level: SeparationLevel,
    score: f64,
    moved: u32,
}

/// Interferer footprint at each granularity.
struct Zones {
    groups: BTreeSet<usize>,
    sockets: BTreeSet<SocketId>,
    servers: BTreeSet<ServerId>,
}

fn zones_of(vm: &VmId, m: &MappingState, t: &Topology) -> Zones {
    let cores = m.cores_of(vm).unwrap_or(&[]);
    let mut z = Zones {
        groups: BTreeSet::new(),
        sockets: BTreeSet::new(),
        servers: BTreeSet::new(),
    };
    for c in cores {
        let (node, socket, server) = t.locate(*c).expect("mapped core");
        let _ = node;
        z.groups.insert(t.llc_group_of(*c));
        z.sockets.insert(socket);
        z.servers.insert(server);
    }
    z
}

fn best_candidate(
    spec: &VmSpec,
    interferer: &VmId,
    neighbors: &BTreeSet<VmId>,
    m: &MappingState,
    t: &Topology,
    bm: &BenefitMatrix,
    cfg: &AlgoConfig,
) -> Option<Candidate> {
    let zones = zones_of(interferer, m, t);
    let residents = m.llc_residents(t);
    let memory = m.memory_of(&spec.id).cloned().unwrap_or_default();
    let current: BTreeMap<NumaNodeId, Vec<CoreId>> = {
        let mut map: BTreeMap<NumaNodeId, Vec<CoreId>> = BTreeMap::new();
        for c in m.cores_of(&spec.id)? {
            map.entry(t.node_of_core(*c)).or_default().push(*c);
        }
        map
    };

    // A node is usable if its LLC group hosts only neighbor-list VMs
    // (ourselves aside) and affinity allows its server.
    let clean = |node: NumaNodeId| -> bool {
        let group = t.llc_group_of(t.numa_node(node).expect("valid").cores[0]);
        residents[group]
            .iter()
            .filter(|id| **id != spec.id)
            .all(|id| neighbors.contains(id))
    };
    let affinity_ok = |node: NumaNodeId| -> bool {
        spec.affinity_servers
            .as_ref()
            .map_or(true, |set| set.contains(&t.server_of_node(node)))
    };

    let mut best: Option<Candidate> = None;
    for level in SeparationLevel::ALL {
        let in_zone = |node: NumaNodeId| -> bool {
            let group = t.llc_group_of(t.numa_node(node).expect("valid").cores[0]);
            match level {
                SeparationLevel::Socket => !zones.groups.contains(&group),
                SeparationLevel::NumaNode => !zones.sockets.contains(&t.socket_of_node(node)),
                SeparationLevel::ServerNode => !zones.servers.contains(&t.server_of_node(node)),
            }
        };

        // Keep whatever already sits on admissible nodes.
        let mut keep: BTreeMap<NumaNodeId, Vec<CoreId>> = BTreeMap::new();
        let mut kept = 0u32;
        for (node, cores) in &current {
            if in_zone(*node) && clean(*node) && affinity_ok(*node) {
                kept += cores.len() as u32;
                keep.insert(*node, cores.clone());
            }
        }
        let deficit = spec.vcpus - kept;
        if deficit == 0 {
            // Already separated at this level; nothing to gain by moving.
            continue;
        }

        // Fill the deficit with free cores nearest to the VM's memory.
        let mut fill_nodes: Vec<(f64, NumaNodeId)> = t
            .numa_nodes()
            .filter(|n| in_zone(n.id) && clean(n.id) && affinity_ok(n.id))
            .map(|n| {
                let spread = BTreeMap::from([(n.id, 1u32)]);
                (existing_distance(&spread, &memory, t), n.id)
            })
            .collect();
        fill_nodes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut new_cores: Vec<CoreId> = keep.values().flatten().copied().collect();
        let mut remaining = deficit;
        for (_, node) in fill_nodes {
            if remaining == 0 {
                break;
            }
            let info = t.numa_node(node).expect("valid");
            let already = keep.get(&node).map_or(0, |v| v.len());
            let free: Vec<CoreId> = info
                .cores
                .iter()
                .filter(|c| m.occupancy(**c) == 0 && !new_cores.contains(c))
                .take((info.cores.len() - already).min(remaining as usize))
                .copied()
                .collect();
            remaining -= free.len() as u32;
            new_cores.extend(free);
        }
        if remaining > 0 {
            continue; // level not feasible
        }
        new_cores.sort();

        let spread: BTreeMap<NumaNodeId, u32> = {
            let mut s: BTreeMap<NumaNodeId, u32> = BTreeMap::new();
            for c in &new_cores {
                *s.entry(t.node_of_core(*c)).or_insert(0) += 1;
            }
            s
        };
        let achieved = achieved_level(&spread, &zones, t);
        let moved = deficit;
        let score = bm.get(spec.class, achieved) - cfg.move_cost_lambda * moved as f64;
        if score <= 0.0 {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => score > b.score || (score == b.score && moved < b.moved),
        };
        if better {
            best = Some(Candidate {
                cores: new_cores,
                level: achieved,
                score,
                moved,
            });
        }
    }
    best
}

/// Strongest separation a destination actually attains from the
/// interferer's footprint.
fn achieved_level(
    spread: &BTreeMap<NumaNodeId, u32>,
    zones: &Zones,
    t: &Topology,
) -> SeparationLevel {
    let out_of_servers = spread
        .keys()
        .all(|n| !zones.servers.contains(&t.server_of_node(*n)));
    if out_of_servers {
        return SeparationLevel::ServerNode;
    }
    let out_of_sockets = spread
        .keys()
        .all(|n| !zones.sockets.contains(&t.socket_of_node(*n)));
    if out_of_sockets {
        return SeparationLevel::NumaNode;
    }
    SeparationLevel::Socket
}
