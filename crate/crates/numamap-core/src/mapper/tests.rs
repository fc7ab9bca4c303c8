use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::topology::{CoreId, NumaNodeId, ServerId, Topology, GIB};
use crate::workload::{AnimalClass, VmId, VmSpec};

use super::*;

pub(crate) const REFERENCE: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference-numascale.topo"));

pub(crate) fn reference() -> Topology {
    Topology::load(REFERENCE).unwrap()
}

/// 2 servers x 2 NUMA nodes x 2 cores: 8 cores, 4 LLC groups.
pub(crate) fn tiny_topology() -> Topology {
    let doc = r#"
        [[servers]]
        torus_coord = [0, 0]
        [[servers.sockets]]
        [[servers.sockets.numa_nodes]]
        cores = 2
        memory_gb = 4
        [[servers.sockets.numa_nodes]]
        cores = 2
        memory_gb = 4

        [[servers]]
        torus_coord = [1, 0]
        [[servers.sockets]]
        [[servers.sockets.numa_nodes]]
        cores = 2
        memory_gb = 4
        [[servers.sockets.numa_nodes]]
        cores = 2
        memory_gb = 4
    "#;
    Topology::load(doc).unwrap()
}

fn vm(id: &str, vcpus: u32, mem_gb: u64, class: AnimalClass) -> VmSpec {
    VmSpec::new(id, vcpus, mem_gb * GIB, class)
}

fn live_of(vms: &[VmSpec]) -> BTreeMap<VmId, VmSpec> {
    vms.iter().map(|v| (v.id.clone(), v.clone())).collect()
}

fn place_all(vms: &[VmSpec], m: &mut MappingState, t: &Topology, cm: &ClassMatrix) {
    let mut live = BTreeMap::new();
    for v in vms {
        place_arrival(v, m, t, cm, &live).unwrap();
        live.insert(v.id.clone(), v.clone());
    }
}

mod class_matrix {
    use super::*;

    #[test]
    fn default_matches_the_compatibility_table() {
        let cm = ClassMatrix::default();
        use AnimalClass::*;
        assert!(cm.compatible(Sheep, Sheep));
        assert!(cm.compatible(Sheep, Rabbit));
        assert!(cm.compatible(Sheep, Devil));
        assert!(cm.compatible(Rabbit, Sheep));
        assert!(!cm.compatible(Rabbit, Rabbit));
        assert!(!cm.compatible(Rabbit, Devil));
        assert!(cm.compatible(Devil, Sheep));
        assert!(!cm.compatible(Devil, Rabbit));
        assert!(cm.compatible(Devil, Devil));
    }

    #[test]
    fn default_is_symmetric() {
        let cm = ClassMatrix::default();
        for a in AnimalClass::ALL {
            for b in AnimalClass::ALL {
                assert_eq!(cm.compatible(a, b), cm.compatible(b, a));
            }
        }
    }
}

mod placement_tests {
    use super::*;

    #[test]
    fn small_vm_lands_on_one_node_with_local_memory() {
        let t = reference();
        let mut m = MappingState::new(&t);
        let cm = ClassMatrix::default();
        let spec = vm("s1", 4, 16, AnimalClass::Sheep);
        let p = place_arrival(&spec, &mut m, &t, &cm, &BTreeMap::new()).unwrap();
        assert_eq!(p.violations, 0);
        let nodes: BTreeSet<NumaNodeId> = p.cores.iter().map(|c| t.node_of_core(*c)).collect();
        assert_eq!(nodes.len(), 1);
        let mem = m.memory_of(&spec.id).unwrap();
        assert_eq!(mem.len(), 1);
        assert_eq!(mem.keys().next(), nodes.iter().next());
        assert_eq!(*mem.values().next().unwrap(), 16 * GIB);
    }

    #[test]
    fn huge_vm_spans_exactly_two_servers() {
        let t = reference();
        let mut m = MappingState::new(&t);
        let cm = ClassMatrix::default();
        let spec = vm("huge", 72, 288, AnimalClass::Sheep);
        let p = place_arrival(&spec, &mut m, &t, &cm, &BTreeMap::new()).unwrap();
        let servers: BTreeSet<ServerId> =
            p.cores.iter().map(|c| t.locate(*c).unwrap().2).collect();
        assert_eq!(servers.len(), 2);
        // All memory local: nine full nodes at 32 GiB each.
        let mem = m.memory_of(&spec.id).unwrap();
        assert_eq!(mem.len(), 9);
        assert!(mem.values().all(|b| *b == 32 * GIB));
    }

    #[test]
    fn rabbit_prefers_clean_node_over_devil_adjacency() {
        // Devil holds half of node 0; clean nodes exist elsewhere.
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let mut m = MappingState::new(&t);
        let devil = vm("devil", 1, 1, AnimalClass::Devil);
        place_all(&[devil.clone()], &mut m, &t, &cm);
        let live = live_of(&[devil]);

        let rabbit = vm("rabbit", 1, 1, AnimalClass::Rabbit);
        let p = place_arrival(&rabbit, &mut m, &t, &cm, &live).unwrap();
        assert_eq!(p.violations, 0);
        let node = t.node_of_core(p.cores[0]);
        assert_ne!(node, NumaNodeId(0), "must not share the devil's LLC group");
    }

    #[test]
    fn violation_count_beats_distance_in_the_objective() {
        // Nodes 1 and 2 full of sheep, node 0 half-held by a devil, node
        // 3 free on the far server: the rabbit must take the far node.
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let mut m = MappingState::new(&t);
        let existing = vec![
            vm("devil", 1, 1, AnimalClass::Devil),
            vm("f1", 2, 1, AnimalClass::Sheep),
            vm("f2", 2, 1, AnimalClass::Sheep),
        ];
        m.assign(existing[0].id.clone(), vec![CoreId(0)]);
        m.assign(existing[1].id.clone(), vec![CoreId(2), CoreId(3)]);
        m.assign(existing[2].id.clone(), vec![CoreId(4), CoreId(5)]);
        for spec in &existing {
            m.place_memory_local_first(&spec.id, spec.memory, &t, true).unwrap();
        }
        let live = live_of(&existing);

        let rabbit = vm("rabbit", 1, 1, AnimalClass::Rabbit);
        let p = place_arrival(&rabbit, &mut m, &t, &cm, &live).unwrap();
        assert_eq!(p.violations, 0);
        assert_eq!(t.node_of_core(p.cores[0]), NumaNodeId(3));
    }

    #[test]
    fn insufficient_cores_is_an_error() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let mut m = MappingState::new(&t);
        let big = vm("big", 9, 1, AnimalClass::Sheep);
        assert!(matches!(
            place_arrival(&big, &mut m, &t, &cm, &BTreeMap::new()),
            Err(PlacementError::InsufficientCores { needed: 9, free: 8 })
        ));
    }

    #[test]
    fn affinity_restricts_placement_to_pinned_servers() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let mut m = MappingState::new(&t);
        let mut spec = vm("pinned", 2, 1, AnimalClass::Sheep);
        spec.affinity_servers = Some(BTreeSet::from([ServerId(1)]));
        let p = place_arrival(&spec, &mut m, &t, &cm, &BTreeMap::new()).unwrap();
        for c in &p.cores {
            assert_eq!(t.locate(*c).unwrap().2, ServerId(1));
        }
    }

    #[test]
    fn memory_overflow_goes_to_nearest_node() {
        // 2 vCPUs on one 4 GiB node demanding 6 GiB: the spill lands on
        // the same-socket neighbor (distance 16), not the remote server.
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let mut m = MappingState::new(&t);
        let spec = vm("wide", 2, 6, AnimalClass::Sheep);
        place_arrival(&spec, &mut m, &t, &cm, &BTreeMap::new()).unwrap();
        let mem = m.memory_of(&spec.id).unwrap();
        assert_eq!(mem.get(&NumaNodeId(0)), Some(&(4 * GIB)));
        assert_eq!(mem.get(&NumaNodeId(1)), Some(&(2 * GIB)));
    }

    #[test]
    fn memory_heavy_vm_is_capped_and_reserves_for_small_vms() {
        // 8-core, 32 GiB node; 2 vCPUs demanding 24 GiB get the
        // core-proportional 8 GiB locally, the rest spills, and the
        // remaining 24 GiB are earmarked for co-hosted small VMs.
        let t = reference();
        let cm = ClassMatrix::default();
        let mut m = MappingState::new(&t);
        let spec = vm("memory-hog", 2, 24, AnimalClass::Sheep);
        place_arrival(&spec, &mut m, &t, &cm, &BTreeMap::new()).unwrap();
        let mem = m.memory_of(&spec.id).unwrap();
        assert_eq!(mem.get(&NumaNodeId(0)), Some(&(8 * GIB)));
        assert_eq!(m.reserved_small_on(NumaNodeId(0)), 24 * GIB);
        // Overflow went to the same-socket neighbor, not into reserves.
        assert_eq!(mem.get(&NumaNodeId(1)), Some(&(16 * GIB)));

        // A small VM placed on the same node may draw on the reservation.
        let small = vm("small", 4, 16, AnimalClass::Sheep);
        let live = live_of(&[spec]);
        let p = place_arrival(&small, &mut m, &t, &cm, &live).unwrap();
        assert_eq!(t.node_of_core(p.cores[0]), NumaNodeId(0));
        assert_eq!(
            m.memory_of(&small.id).unwrap().get(&NumaNodeId(0)),
            Some(&(16 * GIB))
        );
        assert_eq!(m.reserved_small_on(NumaNodeId(0)), 8 * GIB);
        m.assert_consistent(&t);
    }

    #[test]
    fn free_capacity_tracks_assignments() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let mut m = MappingState::new(&t);

        let empty = m.free_capacity(&t);
        assert!(empty.iter().all(|c| c.free_cores == 2 && c.free_memory == 4 * GIB));

        let spec = vm("a", 2, 4, AnimalClass::Sheep);
        place_arrival(&spec, &mut m, &t, &cm, &BTreeMap::new()).unwrap();
        let after = m.free_capacity(&t);
        assert_eq!(after[0].free_cores, 0);
        assert_eq!(after[0].free_memory, 0);
        assert_eq!(after[1].free_cores, 2);

        // Conservation: assigned + free = total, for every node.
        let assigned: u32 = t
            .numa_nodes()
            .map(|n| n.cores.iter().filter(|c| m.occupancy(**c) > 0).count() as u32)
            .sum();
        let free: u32 = after.iter().map(|c| c.free_cores).sum();
        assert_eq!(assigned + free, t.total_cores() as u32);
    }

    #[test]
    fn fully_packed_reference_has_no_free_cores() {
        let t = reference();
        let cm = ClassMatrix::default();
        let mut m = MappingState::new(&t);
        for i in 0..36 {
            let spec = vm(&format!("vm-{i:02}"), 8, 32, AnimalClass::Sheep);
            place_arrival(&spec, &mut m, &t, &cm, &BTreeMap::new()).unwrap();
        }
        assert_eq!(m.total_vcpus(), 288);
        assert!(m.free_capacity(&t).iter().all(|c| c.free_cores == 0));
        m.assert_consistent(&t);
    }

    /// Exhaustive check of the lexicographic objective on small
    /// instances: the chosen placement's (servers, nodes, violations,
    /// distance) tuple is minimal over every feasible node split.
    #[test]
    fn placement_is_lexicographically_minimal_on_small_topologies() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();

        let cases: Vec<(Vec<VmSpec>, VmSpec)> = vec![
            (vec![], vm("x", 3, 2, AnimalClass::Rabbit)),
            (
                vec![vm("a", 1, 1, AnimalClass::Devil)],
                vm("x", 2, 3, AnimalClass::Rabbit),
            ),
            (
                vec![vm("a", 2, 2, AnimalClass::Sheep), vm("b", 1, 1, AnimalClass::Devil)],
                vm("x", 4, 6, AnimalClass::Devil),
            ),
            (
                vec![vm("a", 1, 1, AnimalClass::Rabbit), vm("b", 1, 1, AnimalClass::Rabbit)],
                vm("x", 2, 2, AnimalClass::Sheep),
            ),
            (
                vec![vm("a", 2, 4, AnimalClass::Sheep)],
                vm("x", 3, 6, AnimalClass::Rabbit).sensitive(true),
            ),
        ];

        for (existing, candidate) in cases {
            let mut m = MappingState::new(&t);
            place_all(&existing, &mut m, &t, &cm);
            let live = live_of(&existing);

            let mut chosen = m.clone();
            let p = place_arrival(&candidate, &mut chosen, &t, &cm, &live).unwrap();
            let chosen_key = objective_of(&candidate, &p.cores, &chosen, &t, &cm, &live);

            let best = enumerate_best(&candidate, &m, &t, &cm, &live);
            assert!(
                !less_lex(best, chosen_key),
                "{}: chosen {chosen_key:?} vs exhaustive best {best:?}",
                candidate.id
            );
        }
    }

    /// (servers, nodes, violations, distance) for a concrete core set.
    fn objective_of(
        spec: &VmSpec,
        cores: &[CoreId],
        after: &MappingState,
        t: &Topology,
        cm: &ClassMatrix,
        live: &BTreeMap<VmId, VmSpec>,
    ) -> (usize, usize, usize, f64) {
        let servers: BTreeSet<ServerId> = cores.iter().map(|c| t.locate(*c).unwrap().2).collect();
        let nodes: BTreeSet<NumaNodeId> = cores.iter().map(|c| t.node_of_core(*c)).collect();
        let groups: BTreeSet<usize> = cores.iter().map(|c| t.llc_group_of(*c)).collect();
        let residents = after.llc_residents(t);
        let violations: usize = groups
            .iter()
            .flat_map(|g| residents[*g].iter())
            .filter(|id| **id != spec.id)
            .filter(|id| {
                live.get(*id)
                    .map(|o| !cm.compatible(spec.class, o.class))
                    .unwrap_or(false)
            })
            .count();
        let spread: BTreeMap<NumaNodeId, u32> = {
            let mut s = BTreeMap::new();
            for c in cores {
                *s.entry(t.node_of_core(*c)).or_insert(0u32) += 1;
            }
            s
        };
        let alloc = after.memory_of(&spec.id).unwrap();
        let distance = super::placement::existing_distance(&spread, alloc, t);
        (servers.len(), nodes.len(), violations, distance)
    }

    /// Brute force over all vCPU-count splits across nodes.
    fn enumerate_best(
        spec: &VmSpec,
        m: &MappingState,
        t: &Topology,
        cm: &ClassMatrix,
        live: &BTreeMap<VmId, VmSpec>,
    ) -> (usize, usize, usize, f64) {
        let free = m.free_cores_by_node(t);
        let nodes: Vec<NumaNodeId> = t.numa_nodes().map(|n| n.id).collect();
        let mut best: Option<(usize, usize, usize, f64)> = None;
        let mut split = vec![0u32; nodes.len()];
        enumerate(&mut split, 0, spec.vcpus, &free, &mut |split: &[u32]| {
            let mut trial = m.clone();
            let mut cores = Vec::new();
            for (i, count) in split.iter().enumerate() {
                let info = t.numa_node(nodes[i]).unwrap();
                cores.extend(
                    info.cores
                        .iter()
                        .filter(|c| trial.occupancy(**c) == 0)
                        .take(*count as usize)
                        .copied(),
                );
            }
            if cores.len() != spec.vcpus as usize {
                return;
            }
            trial.assign(spec.id.clone(), cores.clone());
            if trial
                .place_memory_local_first(&spec.id, spec.memory, t, true)
                .is_err()
            {
                return;
            }
            let key = objective_of(spec, &cores, &trial, t, cm, live);
            if best.map_or(true, |b| less_lex(key, b)) {
                best = Some(key);
            }
        });
        best.unwrap()
    }

    fn less_lex(a: (usize, usize, usize, f64), b: (usize, usize, usize, f64)) -> bool {
        (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)).then(a.3.total_cmp(&b.3))
            == std::cmp::Ordering::Less
    }

    fn enumerate(
        split: &mut Vec<u32>,
        idx: usize,
        remaining: u32,
        free: &[u32],
        f: &mut impl FnMut(&[u32]),
    ) {
        if idx == split.len() {
            if remaining == 0 {
                f(split);
            }
            return;
        }
        for take in 0..=free[idx].min(remaining) {
            split[idx] = take;
            enumerate(split, idx + 1, remaining - take, free, f);
        }
        split[idx] = 0;
    }
}

mod reshuffle_tests {
    use super::*;

    #[test]
    fn existing_clean_slot_means_no_moves() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let cfg = AlgoConfig::default();
        let mut m = MappingState::new(&t);
        let s1 = vm("sheep-1", 1, 1, AnimalClass::Sheep);
        m.assign(s1.id.clone(), vec![CoreId(0)]);
        m.place_memory_local_first(&s1.id, s1.memory, &t, true).unwrap();
        let live = live_of(&[s1]);

        let rabbit = vm("rabbit", 2, 2, AnimalClass::Rabbit);
        let (moves, placement) =
            reshuffle_for_arrival(&rabbit, &mut m, &t, &cm, &live, &cfg).unwrap();
        assert!(moves.is_empty());
        assert_eq!(placement.violations, 0);
    }

    #[test]
    fn one_sheep_is_consolidated_to_open_a_node() {
        // Sheep on cores 0 and 2 (half of nodes 0 and 1), devils filling
        // server 1. A 2-vCPU rabbit fits only if one sheep joins the
        // other.
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let cfg = AlgoConfig::default();
        let mut m = MappingState::new(&t);
        let s1 = vm("sheep-1", 1, 1, AnimalClass::Sheep);
        let s2 = vm("sheep-2", 1, 1, AnimalClass::Sheep);
        let d1 = vm("devil-1", 4, 4, AnimalClass::Devil);
        m.assign(s1.id.clone(), vec![CoreId(0)]);
        m.assign(s2.id.clone(), vec![CoreId(2)]);
        m.assign(d1.id.clone(), vec![CoreId(4), CoreId(5), CoreId(6), CoreId(7)]);
        for spec in [&s1, &s2, &d1] {
            m.place_memory_local_first(&spec.id, spec.memory, &t, true).unwrap();
        }
        let live = live_of(&[s1, s2, d1]);

        let rabbit = vm("rabbit", 2, 2, AnimalClass::Rabbit);
        let (moves, placement) =
            reshuffle_for_arrival(&rabbit, &mut m, &t, &cm, &live, &cfg).unwrap();
        assert_eq!(moves.len(), 1, "exactly one sheep consolidates: {moves:?}");
        assert_eq!(placement.violations, 0);
        let rabbit_nodes: BTreeSet<NumaNodeId> =
            placement.cores.iter().map(|c| t.node_of_core(*c)).collect();
        assert_eq!(rabbit_nodes.len(), 1);
        m.assert_consistent(&t);
    }

    #[test]
    fn bound_zero_places_best_effort_with_violations() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let cfg = AlgoConfig {
            max_reshuffles_per_epoch: 0,
            ..AlgoConfig::default()
        };
        let mut m = MappingState::new(&t);
        // Devils on half of every node: a rabbit cannot land clean.
        let devils: Vec<VmSpec> = (0..4)
            .map(|i| vm(&format!("devil-{i}"), 1, 1, AnimalClass::Devil))
            .collect();
        for (i, d) in devils.iter().enumerate() {
            m.assign(d.id.clone(), vec![CoreId(2 * i)]);
            m.place_memory_local_first(&d.id, d.memory, &t, true).unwrap();
        }
        let live = live_of(&devils);
        let rabbit = vm("rabbit", 1, 1, AnimalClass::Rabbit);
        let (moves, placement) =
            reshuffle_for_arrival(&rabbit, &mut m, &t, &cm, &live, &cfg).unwrap();
        assert!(moves.is_empty());
        assert!(placement.violations > 0, "flagged best-effort placement");
    }
}

mod detect_tests {
    use super::*;

    fn cfg_with_threshold(t: f64) -> AlgoConfig {
        AlgoConfig {
            threshold: t,
            ..AlgoConfig::default()
        }
    }

    #[test]
    fn deviation_at_or_above_threshold_is_included() {
        let specs = live_of(&[vm("a", 1, 1, AnimalClass::Sheep)]);
        let samples = BTreeMap::from([(VmId::from("a"), 0.8)]);
        let (affected, skipped) = detect_affected(&specs, &samples, &cfg_with_threshold(0.1));
        assert!(skipped.is_empty());
        assert_eq!(affected.entries.len(), 1);
        assert!((affected.entries[0].1 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn small_deviation_is_excluded() {
        let specs = live_of(&[vm("a", 1, 1, AnimalClass::Sheep)]);
        let samples = BTreeMap::from([(VmId::from("a"), 0.95)]);
        let (affected, _) = detect_affected(&specs, &samples, &cfg_with_threshold(0.1));
        assert!(affected.is_empty());
    }

    #[test]
    fn sorted_descending_by_deviation() {
        let specs = live_of(&[
            vm("a", 1, 1, AnimalClass::Sheep),
            vm("b", 1, 1, AnimalClass::Sheep),
            vm("c", 1, 1, AnimalClass::Sheep),
        ]);
        let samples = BTreeMap::from([
            (VmId::from("a"), 0.85),
            (VmId::from("b"), 0.7),
            (VmId::from("c"), 0.88),
        ]);
        let (affected, _) = detect_affected(&specs, &samples, &cfg_with_threshold(0.1));
        let devs: Vec<f64> = affected.entries.iter().map(|e| e.1).collect();
        assert_eq!(affected.entries[0].0, VmId::from("b"));
        assert!(devs.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn missing_sample_is_skipped_and_reported() {
        let specs = live_of(&[
            vm("a", 1, 1, AnimalClass::Sheep),
            vm("b", 1, 1, AnimalClass::Sheep),
        ]);
        let samples = BTreeMap::from([(VmId::from("a"), 0.5)]);
        let (affected, skipped) = detect_affected(&specs, &samples, &cfg_with_threshold(0.1));
        assert_eq!(affected.entries.len(), 1);
        assert_eq!(skipped, vec![VmId::from("b")]);
    }

    proptest! {
        /// Membership matches the trigger formula exactly, for arbitrary
        /// expected and measured performance and thresholds.
        #[test]
        fn trigger_matches_formula(
            entries in proptest::collection::vec((0.01f64..10.0, 0.0f64..10.0), 1..20),
            threshold in 0.01f64..0.99,
        ) {
            let mut specs = BTreeMap::new();
            let mut samples = BTreeMap::new();
            for (i, (expected, p)) in entries.iter().enumerate() {
                let id = format!("vm-{i:02}");
                specs.insert(
                    VmId::new(id.clone()),
                    vm(&id, 1, 1, AnimalClass::Sheep).expected_perf(*expected),
                );
                samples.insert(VmId::new(id), *p);
            }
            let (affected, _) = detect_affected(&specs, &samples, &cfg_with_threshold(threshold));
            let got: BTreeSet<&VmId> = affected.entries.iter().map(|e| &e.0).collect();
            for (id, spec) in &specs {
                let p = samples[id];
                let expected_member = (spec.expected_perf - p) / spec.expected_perf >= threshold;
                prop_assert_eq!(expected_member, got.contains(id));
            }
        }
    }
}

mod neighbor_tests {
    use super::*;

    #[test]
    fn rabbit_only_neighbors_sheep() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let vms = [
            vm("r", 1, 1, AnimalClass::Rabbit),
            vm("s", 1, 1, AnimalClass::Sheep),
            vm("d", 1, 1, AnimalClass::Devil),
            vm("r2", 1, 1, AnimalClass::Rabbit),
        ];
        let live = live_of(&vms);
        let n = build_neighbor_list(&vms[0], &live, &cm, &t);
        assert_eq!(n, BTreeSet::from([VmId::from("s")]));
    }

    #[test]
    fn sheep_neighbors_everyone_else() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let vms = [
            vm("s", 1, 1, AnimalClass::Sheep),
            vm("r", 1, 1, AnimalClass::Rabbit),
            vm("d", 1, 1, AnimalClass::Devil),
        ];
        let live = live_of(&vms);
        let n = build_neighbor_list(&vms[0], &live, &cm, &t);
        assert_eq!(n.len(), 2);
    }

    #[test]
    fn devil_among_rabbits_has_no_neighbors() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let vms = [vm("d", 1, 1, AnimalClass::Devil), vm("r", 1, 1, AnimalClass::Rabbit)];
        let live = live_of(&vms);
        assert!(build_neighbor_list(&vms[0], &live, &cm, &t).is_empty());
    }

    #[test]
    fn disjoint_affinity_excludes_a_compatible_vm() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let mut a = vm("a", 1, 1, AnimalClass::Sheep);
        a.affinity_servers = Some(BTreeSet::from([ServerId(0)]));
        let mut b = vm("b", 1, 1, AnimalClass::Sheep);
        b.affinity_servers = Some(BTreeSet::from([ServerId(1)]));
        let live = live_of(&[a.clone(), b]);
        assert!(build_neighbor_list(&a, &live, &cm, &t).is_empty());
    }
}

mod benefit_tests {
    use super::*;

    #[test]
    fn initial_values_match_the_benefit_table() {
        let bm = BenefitMatrix::default();
        use AnimalClass::*;
        use SeparationLevel::*;
        assert_eq!(bm.get(Sheep, Socket), 1.0);
        assert_eq!(bm.get(Sheep, NumaNode), 1.0);
        assert_eq!(bm.get(Sheep, ServerNode), 1.0);
        assert_eq!(bm.get(Rabbit, Socket), 4.0);
        assert_eq!(bm.get(Rabbit, NumaNode), 5.0);
        assert_eq!(bm.get(Rabbit, ServerNode), 6.0);
        assert_eq!(bm.get(Devil, Socket), 7.0);
        assert_eq!(bm.get(Devil, NumaNode), 8.0);
        assert_eq!(bm.get(Devil, ServerNode), 9.0);
    }

    #[test]
    fn ema_moves_toward_scaled_improvement() {
        let mut bm = BenefitMatrix::default();
        // 80% improvement: target 8, from 5 with eta 0.3 lands on 5.9.
        update_benefit_matrix(
            &mut bm,
            AnimalClass::Rabbit,
            SeparationLevel::NumaNode,
            1.0,
            1.8,
            0.3,
        );
        assert!((bm.get(AnimalClass::Rabbit, SeparationLevel::NumaNode) - 5.9).abs() < 1e-12);
    }

    #[test]
    fn zero_improvement_decays_to_the_lower_clamp() {
        let mut bm = BenefitMatrix::default();
        for _ in 0..100 {
            update_benefit_matrix(
                &mut bm,
                AnimalClass::Devil,
                SeparationLevel::ServerNode,
                1.0,
                1.0,
                0.3,
            );
        }
        assert_eq!(bm.get(AnimalClass::Devil, SeparationLevel::ServerNode), 1.0);
    }

    #[test]
    fn huge_improvement_clamps_at_ten() {
        let mut bm = BenefitMatrix::default();
        for _ in 0..10 {
            update_benefit_matrix(
                &mut bm,
                AnimalClass::Rabbit,
                SeparationLevel::Socket,
                1.0,
                3.0,
                0.3,
            );
        }
        assert_eq!(bm.get(AnimalClass::Rabbit, SeparationLevel::Socket), 10.0);
    }

    proptest! {
        /// Entries stay in [1, 10] for any update sequence.
        #[test]
        fn entries_stay_bounded(
            updates in proptest::collection::vec(
                (0usize..3, 0usize..3, 0.01f64..5.0, 0.01f64..5.0, 0.01f64..1.0),
                1..200,
            ),
        ) {
            let mut bm = BenefitMatrix::default();
            for (c, l, before, after, eta) in updates {
                let class = AnimalClass::ALL[c];
                let level = SeparationLevel::ALL[l];
                update_benefit_matrix(&mut bm, class, level, before, after, eta);
                let v = bm.get(class, level);
                prop_assert!((1.0..=10.0).contains(&v), "value {v} escaped [1,10]");
            }
        }
    }
}

mod remap_tests {
    use super::*;

    /// An affected rabbit sharing its LLC group with a devil moves to the
    /// free node; on a different socket of the same server that is the
    /// numa_node separation level, initial benefit 5.
    #[test]
    fn affected_rabbit_escapes_devil_to_free_node() {
        let doc = r#"
            [[servers]]
            torus_coord = [0, 0]
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
        "#;
        let t = Topology::load(doc).unwrap();
        let cm = ClassMatrix::default();
        let bm = BenefitMatrix::default();
        let cfg = AlgoConfig::default();
        let mut m = MappingState::new(&t);

        let rabbit = vm("rabbit", 1, 1, AnimalClass::Rabbit);
        let devil = vm("devil", 1, 1, AnimalClass::Devil);
        m.assign(rabbit.id.clone(), vec![CoreId(0)]);
        m.place_memory_local_first(&rabbit.id, rabbit.memory, &t, true).unwrap();
        m.assign(devil.id.clone(), vec![CoreId(1)]);
        m.place_memory_local_first(&devil.id, devil.memory, &t, true).unwrap();
        let live = live_of(&[rabbit, devil]);

        let affected = AffectedList {
            entries: vec![(VmId::from("rabbit"), 0.45)],
        };
        let samples = BTreeMap::from([(VmId::from("rabbit"), 0.55), (VmId::from("devil"), 1.0)]);
        let (actions, pending) =
            compute_remap(&affected, &mut m, &t, &cm, &bm, &live, &samples, &cfg);
        assert_eq!(actions.len(), 1);
        let Action::Remap { vm: moved, to_cores, level, score, .. } = &actions[0] else {
            panic!("expected a remap, got {actions:?}");
        };
        assert_eq!(moved, &VmId::from("rabbit"));
        assert_eq!(t.node_of_core(to_cores[0]), NumaNodeId(1));
        assert_eq!(*level, SeparationLevel::NumaNode);
        // Benefit 5 minus one moved vCPU at lambda 0.25.
        assert!((score - 4.75).abs() < 1e-12);
        assert_eq!(pending.len(), 1);
        assert_eq!(pending[0].p_before, 0.55);
    }

    /// A sheep's benefit (1 at every level) never pays for a move.
    #[test]
    fn sheep_never_moves_when_cost_exceeds_benefit() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let bm = BenefitMatrix::default();
        let cfg = AlgoConfig {
            move_cost_lambda: 1.5,
            ..AlgoConfig::default()
        };
        let mut m = MappingState::new(&t);
        let sheep = vm("sheep", 1, 1, AnimalClass::Sheep);
        let devil = vm("devil", 1, 1, AnimalClass::Devil);
        m.assign(sheep.id.clone(), vec![CoreId(0)]);
        m.place_memory_local_first(&sheep.id, sheep.memory, &t, true).unwrap();
        m.assign(devil.id.clone(), vec![CoreId(1)]);
        m.place_memory_local_first(&devil.id, devil.memory, &t, true).unwrap();
        let live = live_of(&[sheep, devil]);

        let affected = AffectedList {
            entries: vec![(VmId::from("sheep"), 0.12)],
        };
        let samples = BTreeMap::from([(VmId::from("sheep"), 0.88)]);
        let before = m.clone();
        let (actions, _) = compute_remap(&affected, &mut m, &t, &cm, &bm, &live, &samples, &cfg);
        assert!(actions.is_empty());
        assert_eq!(m, before);
    }

    /// Sorted processing: the higher-deviation VM is remapped first.
    #[test]
    fn higher_deviation_wins_the_contended_slot() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let bm = BenefitMatrix::default();
        let cfg = AlgoConfig::default();
        let mut m = MappingState::new(&t);

        let r1 = vm("r1", 1, 1, AnimalClass::Rabbit);
        let d1 = vm("d1", 1, 1, AnimalClass::Devil);
        let r2 = vm("r2", 1, 1, AnimalClass::Rabbit);
        let d2 = vm("d2", 1, 1, AnimalClass::Devil);
        m.assign(r1.id.clone(), vec![CoreId(0)]);
        m.assign(d1.id.clone(), vec![CoreId(1)]);
        m.assign(r2.id.clone(), vec![CoreId(2)]);
        m.assign(d2.id.clone(), vec![CoreId(3)]);
        for spec in [&r1, &d1, &r2, &d2] {
            m.place_memory_local_first(&spec.id, spec.memory, &t, true).unwrap();
        }
        let live = live_of(&[r1, d1, r2, d2]);

        let affected = AffectedList {
            entries: vec![(VmId::from("r2"), 0.5), (VmId::from("r1"), 0.4)],
        };
        let samples = BTreeMap::from([(VmId::from("r1"), 0.6), (VmId::from("r2"), 0.5)]);
        let (actions, _) = compute_remap(&affected, &mut m, &t, &cm, &bm, &live, &samples, &cfg);
        assert!(matches!(
            &actions[0],
            Action::Remap { vm, .. } if vm == &VmId::from("r2")
        ));
    }

    /// Soundness: a remap destination never shares an LLC group with a VM
    /// outside the moved VM's neighbor list.
    #[test]
    fn remap_destinations_respect_the_neighbor_list() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let bm = BenefitMatrix::default();
        let cfg = AlgoConfig::default();
        let mut m = MappingState::new(&t);
        // Devils half-filling nodes 1 and 2, rabbit next to a devil on
        // node 0: the only clean escape is node 3.
        let rabbit = vm("rabbit", 1, 1, AnimalClass::Rabbit);
        let d0 = vm("d0", 1, 1, AnimalClass::Devil);
        let d1 = vm("d1", 1, 1, AnimalClass::Devil);
        let d2 = vm("d2", 1, 1, AnimalClass::Devil);
        m.assign(rabbit.id.clone(), vec![CoreId(0)]);
        m.assign(d0.id.clone(), vec![CoreId(1)]);
        m.assign(d1.id.clone(), vec![CoreId(2)]);
        m.assign(d2.id.clone(), vec![CoreId(4)]);
        for spec in [&rabbit, &d0, &d1, &d2] {
            m.place_memory_local_first(&spec.id, spec.memory, &t, true).unwrap();
        }
        let live = live_of(&[rabbit.clone(), d0, d1, d2]);
        let neighbors = build_neighbor_list(&rabbit, &live, &cm, &t);

        let affected = AffectedList {
            entries: vec![(VmId::from("rabbit"), 0.45)],
        };
        let samples = BTreeMap::from([(VmId::from("rabbit"), 0.55)]);
        let (actions, _) = compute_remap(&affected, &mut m, &t, &cm, &bm, &live, &samples, &cfg);
        assert_eq!(actions.len(), 1);
        let residents = m.llc_residents(&t);
        let cores = m.cores_of(&VmId::from("rabbit")).unwrap();
        for c in cores {
            for other in &residents[t.llc_group_of(*c)] {
                if other != &VmId::from("rabbit") {
                    assert!(neighbors.contains(other), "{other} not in neighbor list");
                }
            }
        }
        assert_eq!(t.node_of_core(cores[0]), NumaNodeId(3));
    }
}

mod step_tests {
    use super::*;

    fn two_vm_setup() -> (Topology, MappingState, BTreeMap<VmId, VmSpec>) {
        let t = tiny_topology();
        let mut m = MappingState::new(&t);
        let rabbit = vm("rabbit", 1, 1, AnimalClass::Rabbit);
        let devil = vm("devil", 1, 1, AnimalClass::Devil);
        m.assign(rabbit.id.clone(), vec![CoreId(0)]);
        m.place_memory_local_first(&rabbit.id, rabbit.memory, &t, true).unwrap();
        m.assign(devil.id.clone(), vec![CoreId(1)]);
        m.place_memory_local_first(&devil.id, devil.memory, &t, true).unwrap();
        let live = live_of(&[rabbit, devil]);
        (t, m, live)
    }

    #[test]
    fn all_within_threshold_changes_nothing() {
        let (t, mut m, live) = two_vm_setup();
        let cm = ClassMatrix::default();
        let mut bm = BenefitMatrix::default();
        let mut pending = Vec::new();
        let cfg = AlgoConfig::default();
        let samples = BTreeMap::from([
            (VmId::from("rabbit"), 0.95),
            (VmId::from("devil"), 0.97),
        ]);
        let before = m.clone();
        let outcome = step(&mut m, &live, &samples, &cfg, &t, &cm, &mut bm, &mut pending);
        assert!(outcome.affected.is_empty());
        assert!(outcome.actions.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn one_affected_vm_yields_one_remap() {
        let (t, mut m, live) = two_vm_setup();
        let cm = ClassMatrix::default();
        let mut bm = BenefitMatrix::default();
        let mut pending = Vec::new();
        let cfg = AlgoConfig::default();
        let samples = BTreeMap::from([
            (VmId::from("rabbit"), 0.55),
            (VmId::from("devil"), 0.97),
        ]);
        let outcome = step(&mut m, &live, &samples, &cfg, &t, &cm, &mut bm, &mut pending);
        assert_eq!(outcome.affected.entries.len(), 1);
        assert_eq!(outcome.actions.len(), 1);
        assert!(matches!(outcome.actions[0], Action::Remap { .. }));
        assert_eq!(pending.len(), 1);
    }

    #[test]
    fn step_is_deterministic() {
        let (t, m0, live) = two_vm_setup();
        let cm = ClassMatrix::default();
        let cfg = AlgoConfig::default();
        let samples = BTreeMap::from([
            (VmId::from("rabbit"), 0.55),
            (VmId::from("devil"), 0.97),
        ]);
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut m = m0.clone();
            let mut bm = BenefitMatrix::default();
            let mut pending = Vec::new();
            let outcome = step(&mut m, &live, &samples, &cfg, &t, &cm, &mut bm, &mut pending);
            runs.push((m, outcome, bm, pending));
        }
        assert_eq!(runs[0], runs[1]);
    }

    #[test]
    fn pending_updates_feed_the_benefit_matrix_next_step() {
        let (t, mut m, live) = two_vm_setup();
        let cm = ClassMatrix::default();
        let mut bm = BenefitMatrix::default();
        let mut pending = Vec::new();
        let cfg = AlgoConfig::default();
        // Epoch 1: the rabbit is remapped.
        let samples = BTreeMap::from([
            (VmId::from("rabbit"), 0.55),
            (VmId::from("devil"), 0.97),
        ]);
        step(&mut m, &live, &samples, &cfg, &t, &cm, &mut bm, &mut pending);
        assert_eq!(pending.len(), 1);
        let level = pending[0].level;
        // Epoch 2: the rabbit recovered; the matrix learns from the
        // 0.55 -> 1.0 improvement.
        let samples = BTreeMap::from([
            (VmId::from("rabbit"), 1.0),
            (VmId::from("devil"), 0.97),
        ]);
        step(&mut m, &live, &samples, &cfg, &t, &cm, &mut bm, &mut pending);
        assert!(pending.is_empty());
        let initial = BenefitMatrix::default().get(AnimalClass::Rabbit, level);
        let expected = initial + 0.3 * (10.0 * (0.45 / 0.55) - initial);
        let expected = expected.clamp(1.0, 10.0);
        assert!((bm.get(AnimalClass::Rabbit, level) - expected).abs() < 1e-9);
    }

    /// With noise off and a conflict-free configuration reachable,
    /// repeated steps reach a fixed point (empty affected list) within
    /// |VMs| x 3 epochs.
    #[test]
    fn converges_to_a_fixed_point_without_noise() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let cfg = AlgoConfig::default();
        let params = crate::perfmodel::PerfParams::default().with_noise_sigma(0.0);

        // Force a conflicted start: rabbit with devil on node 0.
        let rabbit = vm("rabbit", 1, 1, AnimalClass::Rabbit);
        let devil = vm("devil", 1, 1, AnimalClass::Devil);
        let sheep = vm("sheep", 2, 2, AnimalClass::Sheep);
        let mut m = MappingState::new(&t);
        m.assign(rabbit.id.clone(), vec![CoreId(0)]);
        m.assign(devil.id.clone(), vec![CoreId(1)]);
        m.assign(sheep.id.clone(), vec![CoreId(2), CoreId(3)]);
        for spec in [&rabbit, &devil, &sheep] {
            m.place_memory_local_first(&spec.id, spec.memory, &t, true).unwrap();
        }
        let live = live_of(&[rabbit, devil, sheep]);

        let mut bm = BenefitMatrix::default();
        let mut pending = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let budget = live.len() * 3;
        let mut converged = false;
        for _ in 0..=budget {
            let mut samples = BTreeMap::new();
            for (id, spec) in &live {
                let est =
                    crate::perfmodel::estimate_perf(spec, &m, &t, &live, &params, &mut rng)
                        .unwrap();
                samples.insert(id.clone(), est.p);
            }
            let outcome = step(&mut m, &live, &samples, &cfg, &t, &cm, &mut bm, &mut pending);
            if outcome.affected.is_empty() {
                converged = true;
                break;
            }
        }
        assert!(converged, "no fixed point within {budget} epochs");
        m.assert_consistent(&t);
    }
}

mod vanilla_tests {
    use super::*;

    #[test]
    fn zero_migration_probability_is_identity() {
        let t = tiny_topology();
        let mut m = MappingState::new(&t);
        let spec = vm("a", 4, 2, AnimalClass::Sheep);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = VanillaParams {
            migrate_prob: 0.0,
            ..VanillaParams::default()
        };
        vanilla_place_arrival(&spec, &mut m, &t, &mut rng, &params).unwrap();
        let before = m.clone();
        vanilla_step(&mut m, &t, &mut rng, &params);
        assert_eq!(m, before);
    }

    #[test]
    fn certain_migration_reaches_both_cores() {
        let doc = r#"
            [[servers]]
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
        "#;
        let t = Topology::load(doc).unwrap();
        let params = VanillaParams {
            migrate_prob: 1.0,
            ..VanillaParams::default()
        };
        let mut seen = BTreeSet::new();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = MappingState::new(&t);
            let spec = vm("a", 1, 1, AnimalClass::Sheep);
            vanilla_place_arrival(&spec, &mut m, &t, &mut rng, &params).unwrap();
            vanilla_step(&mut m, &t, &mut rng, &params);
            seen.insert(m.cores_of(&spec.id).unwrap()[0]);
        }
        assert_eq!(seen.len(), 2, "both cores should be reachable: {seen:?}");
    }

    #[test]
    fn overbooking_is_pigeonholed_beyond_core_count() {
        // 300 vCPUs on 288 cores: at least 12 cores run two vCPUs.
        let t = reference();
        let mut m = MappingState::new(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = VanillaParams::default();
        for i in 0..75 {
            let spec = vm(&format!("vm-{i:03}"), 4, 1, AnimalClass::Sheep);
            vanilla_place_arrival(&spec, &mut m, &t, &mut rng, &params).unwrap();
        }
        let overbooked = (0..t.total_cores())
            .filter(|c| m.occupancy(CoreId(*c)) > 1)
            .count();
        assert!(overbooked >= 12, "expected >= 12 overbooked cores, got {overbooked}");
        let max_occ = (0..t.total_cores())
            .map(|c| m.occupancy(CoreId(c)))
            .max()
            .unwrap();
        assert!(max_occ <= params.k_max);
    }

    #[test]
    fn churn_respects_the_overbooking_cap() {
        let t = tiny_topology();
        let mut m = MappingState::new(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = VanillaParams {
            migrate_prob: 0.9,
            k_max: 2,
            churn_sigma: 0.0,
        };
        for i in 0..3 {
            let spec = vm(&format!("vm-{i}"), 4, 1, AnimalClass::Sheep);
            vanilla_place_arrival(&spec, &mut m, &t, &mut rng, &params).unwrap();
        }
        for _ in 0..50 {
            vanilla_step(&mut m, &t, &mut rng, &params);
            let max_occ = (0..t.total_cores())
                .map(|c| m.occupancy(CoreId(c)))
                .max()
                .unwrap();
            assert!(max_occ <= 2);
        }
        m.assert_consistent(&t);
    }
}

mod state_tests {
    use super::*;

    #[test]
    fn departure_frees_cores_and_memory() {
        let t = tiny_topology();
        let cm = ClassMatrix::default();
        let mut m = MappingState::new(&t);
        let spec = vm("a", 3, 5, AnimalClass::Sheep);
        place_arrival(&spec, &mut m, &t, &cm, &BTreeMap::new()).unwrap();
        assert!(m.total_vcpus() > 0);
        m.free_vm(&spec.id, &t);
        assert_eq!(m.total_vcpus(), 0);
        assert!(m.memory_of(&spec.id).is_none());
        assert!(m
            .free_capacity(&t)
            .iter()
            .all(|c| c.free_cores == 2 && c.free_memory == 4 * GIB));
        m.assert_consistent(&t);
    }

    proptest! {
        /// Conservation under arbitrary arrive/depart interleavings:
        /// live vCPUs always equal summed core occupancy, memory books
        /// balance, and no node over-allocates.
        #[test]
        fn books_balance_under_random_churn(
            ops in proptest::collection::vec((0u8..2, 0usize..6, 1u32..3, 1u64..3), 1..40),
        ) {
            let t = tiny_topology();
            let cm = ClassMatrix::default();
            let mut m = MappingState::new(&t);
            let mut live: BTreeMap<VmId, VmSpec> = BTreeMap::new();
            for (op, slot, vcpus, mem) in ops {
                let id = VmId::new(format!("vm-{slot}"));
                if op == 0 && !live.contains_key(&id) {
                    let spec =
                        VmSpec::new(format!("vm-{slot}"), vcpus, mem * GIB, AnimalClass::Sheep);
                    if place_arrival(&spec, &mut m, &t, &cm, &live).is_ok() {
                        live.insert(id, spec);
                    }
                } else if live.contains_key(&id) {
                    m.free_vm(&id, &t);
                    live.remove(&id);
                }
                m.assert_consistent(&t);
                let live_vcpus: u32 = live.values().map(|v| v.vcpus).sum();
                prop_assert_eq!(live_vcpus, m.total_vcpus());
            }
        }
    }
}
