//! Brute-force placement oracle for small instances: exhaustively
//! enumerates every non-overbooked distribution of vCPUs over NUMA nodes
//! (cores within a node are interchangeable), places memory greedily
//! local-first, and returns the mapping maximizing total relative
//! performance with noise disabled. Exists to verify the mapper, so it
//! shares nothing with the mapper's search.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::mapper::MappingState;
use crate::topology::{NumaNodeId, Topology};
use crate::workload::VmSpec;

use super::{contention_factor, locality_factor, overbooking_factor, PerfParams};

/// Enumeration bound: compositions of all VMs' vCPUs over the nodes.
const MAX_CANDIDATES: u128 = 2_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance too large: ~{candidates} candidate mappings (limit {MAX_CANDIDATES})")]
    TooLarge { candidates: u128 },
    #[error("instance cannot fit: {0}")]
    Infeasible(String),
}

/// Searches every placement of `vms` on `t` and returns the best mapping
/// together with its total p. Deterministic: the first optimum in
/// enumeration order wins.
pub fn oracle_best_mapping(
    vms: &[VmSpec],
    t: &Topology,
    params: &PerfParams,
) -> Result<(MappingState, f64), OracleError> {
    let nodes: Vec<(NumaNodeId, u32)> = t
        .numa_nodes()
        .map(|n| (n.id, n.cores.len() as u32))
        .collect();
    let total_cores: u32 = nodes.iter().map(|(_, c)| c).sum();
    let total_vcpus: u32 = vms.iter().map(|v| v.vcpus).sum();
    if total_vcpus > total_cores {
        return Err(OracleError::Infeasible(format!(
            "{total_vcpus} vCPUs on {total_cores} cores without overbooking"
        )));
    }

    let mut estimate: u128 = 1;
    for vm in vms {
        estimate = estimate.saturating_mul(compositions(vm.vcpus, nodes.len() as u32));
        if estimate > MAX_CANDIDATES {
            return Err(OracleError::TooLarge { candidates: estimate });
        }
    }

    let mut search = Search {
        vms,
        t,
        params,
        nodes: &nodes,
        free: nodes.iter().map(|(_, c)| *c).collect(),
        splits: vec![Vec::new(); vms.len()],
        best: None,
    };
    search.recurse(0);
    search
        .best
        .map(|(m, total)| (m, total))
        .ok_or_else(|| OracleError::Infeasible("no feasible placement".into()))
}

/// Number of weak compositions of `v` into `k` parts.
fn compositions(v: u32, k: u32) -> u128 {
    // C(v + k - 1, k - 1)
    let n = (v + k - 1) as u128;
    let r = (k - 1) as u128;
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

struct Search<'a> {
    vms: &'a [VmSpec],
    t: &'a Topology,
    params: &'a PerfParams,
    nodes: &'a [(NumaNodeId, u32)],
    free: Vec<u32>,
    splits: Vec<Vec<(NumaNodeId, u32)>>,
    best: Option<(MappingState, f64)>,
}

impl Search<'_> {
    fn recurse(&mut self, vm_idx: usize) {
        if vm_idx == self.vms.len() {
            self.score_leaf();
            return;
        }
        let vcpus = self.vms[vm_idx].vcpus;
        let mut split = Vec::new();
        self.distribute(vm_idx, 0, vcpus, &mut split);
    }

    fn distribute(
        &mut self,
        vm_idx: usize,
        node_idx: usize,
        remaining: u32,
        split: &mut Vec<(NumaNodeId, u32)>,
    ) {
        if remaining == 0 {
            self.splits[vm_idx] = split.clone();
            self.recurse(vm_idx + 1);
            return;
        }
        if node_idx == self.nodes.len() {
            return;
        }
        let tail: u32 = (node_idx..self.nodes.len()).map(|i| self.free[i]).sum();
        if tail < remaining {
            return;
        }
        let hi = self.free[node_idx].min(remaining);
        for take in (0..=hi).rev() {
            if take > 0 {
                split.push((self.nodes[node_idx].0, take));
                self.free[node_idx] -= take;
            }
            self.distribute(vm_idx, node_idx + 1, remaining - take, split);
            if take > 0 {
                self.free[node_idx] += take;
                split.pop();
            }
        }
    }

    fn score_leaf(&mut self) {
        let mut m = MappingState::new(self.t);
        let live: BTreeMap<_, _> = self
            .vms
            .iter()
            .map(|v| (v.id.clone(), v.clone()))
            .collect();

        // Materialize cores and memory VM by VM, in input order.
        for (vm, split) in self.vms.iter().zip(&self.splits) {
            let mut cores = Vec::with_capacity(vm.vcpus as usize);
            for (node, count) in split {
                let info = self.t.numa_node(*node).expect("valid node");
                cores.extend(
                    info.cores
                        .iter()
                        .filter(|c| m.occupancy(**c) == 0)
                        .take(*count as usize)
                        .copied(),
                );
            }
            m.assign(vm.id.clone(), cores);
            if !self.place_memory(vm, split, &mut m) {
                return; // memory does not fit this shape
            }
        }

        let mut total = 0.0;
        for vm in self.vms {
            let c = contention_factor(vm, &m, self.t, &live, self.params).expect("mapped");
            let l = locality_factor(vm, &m, self.t, self.params).expect("mapped");
            let o = overbooking_factor(vm, &m).expect("mapped");
            total += c * l * o;
        }
        let better = match &self.best {
            None => true,
            Some((_, best_total)) => total > *best_total,
        };
        if better {
            self.best = Some((m, total));
        }
    }

    /// Greedy local-first fill: hosting nodes in id order, then the rest
    /// by distance from the hosting nodes.
    fn place_memory(
        &self,
        vm: &VmSpec,
        split: &[(NumaNodeId, u32)],
        m: &mut MappingState,
    ) -> bool {
        let mut remaining = vm.memory;
        let mut takes: Vec<(NumaNodeId, u64)> = Vec::new();
        let free_mem = |m: &MappingState, node: NumaNodeId| {
            let info = self.t.numa_node(node).expect("valid node");
            info.memory_capacity
                .saturating_sub(info.memory_reserved)
                .saturating_sub(m.allocated_on(node))
        };
        for (node, _) in split {
            if remaining == 0 {
                break;
            }
            let take = remaining.min(free_mem(m, *node));
            if take > 0 {
                takes.push((*node, take));
                remaining -= take;
            }
        }
        if remaining > 0 {
            let vcpus: u32 = split.iter().map(|(_, c)| c).sum();
            let mut others: Vec<(f64, NumaNodeId)> = self
                .nodes
                .iter()
                .filter(|(n, _)| !split.iter().any(|(h, _)| h == n))
                .map(|(n, _)| {
                    let d = split
                        .iter()
                        .map(|(h, c)| *c as f64 * self.t.distance.get(*h, *n) as f64)
                        .sum::<f64>()
                        / vcpus as f64;
                    (d, *n)
                })
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (_, node) in others {
                if remaining == 0 {
                    break;
                }
                let take = remaining.min(free_mem(m, node));
                if take > 0 {
                    takes.push((node, take));
                    remaining -= take;
                }
            }
        }
        if remaining > 0 {
            return false;
        }
        m.record_memory(&vm.id, &takes);
        true
    }
}
