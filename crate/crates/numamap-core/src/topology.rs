//! Hardware resource layout: servers, sockets, NUMA nodes, cores, and the
//! NUMA distance matrix between nodes.
//!
//! A topology is loaded once from a description file and is immutable
//! afterwards, so it can be shared read-only across any number of
//! concurrent simulation runs.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a schedulable core. Dense within a topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoreId(pub usize);

/// Identifier of a NUMA node. Dense within a topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NumaNodeId(pub usize);

/// Identifier of a socket. Dense within a topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SocketId(pub usize);

/// Identifier of a physical server. Dense within a topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServerId(pub usize);

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for NumaNodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for SocketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const GIB: u64 = 1024 * 1024 * 1024;

/// Default NUMA distance values: 10 local, 16/22 for intra-server
/// neighbors (same socket / cross socket), 160/200 for one/two torus hops.
pub const DEFAULT_TORUS_DISTANCES: TorusDistances = TorusDistances {
    local: 10,
    neighbor_same_socket: 16,
    neighbor_cross_socket: 22,
    one_hop: 160,
    two_hop: 200,
};

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("malformed topology document: {0}")]
    Malformed(String),
    #[error("topology has no servers")]
    Empty,
    #[error("duplicate torus coordinate ({0}, {1})")]
    DuplicateTorusCoord(i64, i64),
    #[error("server {0} is missing a torus coordinate (required with more than one server)")]
    MissingTorusCoord(usize),
    #[error("torus coordinates do not form a full rectangular grid")]
    IncompleteTorusGrid,
    #[error("socket {0} has no NUMA nodes")]
    EmptySocket(usize),
    #[error("NUMA node {0} has no cores")]
    EmptyNumaNode(usize),
    #[error("NUMA node {node}: reserved memory {reserved} exceeds capacity {capacity}")]
    ReservationExceedsCapacity {
        node: usize,
        reserved: u64,
        capacity: u64,
    },
    #[error("distance matrix is {found}x{found2}, expected {expected}x{expected}", found2 = found)]
    DistanceDimension { found: usize, expected: usize },
    #[error("asymmetric distance matrix: d[{i}][{j}]={dij} but d[{j}][{i}]={dji}")]
    AsymmetricDistance { i: usize, j: usize, dij: u32, dji: u32 },
    #[error("d[{i}][{j}]={dij} is below the local distance {local}")]
    SubLocalDistance { i: usize, j: usize, dij: u32, local: u32 },
    #[error("diagonal distance d[{i}][{i}]={found} differs from d[0][0]={local}")]
    NonUniformDiagonal { i: usize, found: u32, local: u32 },
    #[error("SMT merge requested but NUMA node {0} has an odd core count")]
    OddSmtCoreCount(usize),
    #[error("unknown core id {0}")]
    UnknownCore(usize),
    #[error("unknown NUMA node id {0}")]
    UnknownNumaNode(usize),
}

/// Pairwise NUMA distances. Symmetric, minimal on the diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    d: Vec<Vec<u32>>,
}

impl DistanceMatrix {
    /// Validates symmetry, a uniform diagonal, and that no off-diagonal
    /// entry is below the local distance.
    pub fn new(d: Vec<Vec<u32>>, expected_nodes: usize) -> Result<Self, TopologyError> {
        if d.len() != expected_nodes || d.iter().any(|row| row.len() != expected_nodes) {
            return Err(TopologyError::DistanceDimension {
                found: d.len(),
                expected: expected_nodes,
            });
        }
        let local = d[0][0];
        for i in 0..d.len() {
            if d[i][i] != local {
                return Err(TopologyError::NonUniformDiagonal {
                    i,
                    found: d[i][i],
                    local,
                });
            }
            for j in 0..d.len() {
                if d[i][j] != d[j][i] {
                    return Err(TopologyError::AsymmetricDistance {
                        i,
                        j,
                        dij: d[i][j],
                        dji: d[j][i],
                    });
                }
                if d[i][j] < local {
                    return Err(TopologyError::SubLocalDistance {
                        i,
                        j,
                        dij: d[i][j],
                        local,
                    });
                }
            }
        }
        Ok(Self { d })
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn get(&self, a: NumaNodeId, b: NumaNodeId) -> u32 {
        self.d[a.0][b.0]
    }

    /// Local (diagonal) distance.
    pub fn local(&self) -> u32 {
        self.d[0][0]
    }

    /// Largest distance anywhere in the matrix.
    pub fn max(&self) -> u32 {
        self.d.iter().flatten().copied().max().unwrap_or(0)
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.d
    }
}

/// Distance parameters for deriving a matrix from a 2-D torus layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusDistances {
    pub local: u32,
    pub neighbor_same_socket: u32,
    pub neighbor_cross_socket: u32,
    pub one_hop: u32,
    pub two_hop: u32,
}

impl Default for TorusDistances {
    fn default() -> Self {
        DEFAULT_TORUS_DISTANCES
    }
}

/// Granularity at which cores share a last-level cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlcScope {
    /// One LLC group per NUMA node (default).
    #[default]
    NumaNode,
    /// One LLC group per socket.
    Socket,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NumaNode {
    pub id: NumaNodeId,
    pub cores: Vec<CoreId>,
    pub memory_capacity: u64,
    /// Memory statically set aside at load time (rarely used; runtime
    /// reservations for co-hosted small VMs live in the mapping state).
    pub memory_reserved: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Socket {
    pub id: SocketId,
    pub numa_nodes: Vec<NumaNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Server {
    pub id: ServerId,
    pub torus_coord: (i64, i64),
    pub sockets: Vec<Socket>,
}

/// The full resource layout plus derived lookup tables.
#[derive(Debug, Clone, Serialize)]
pub struct Topology {
    pub servers: Vec<Server>,
    pub distance: DistanceMatrix,
    pub llc_scope: LlcScope,
    // Derived, indexed by dense ids.
    core_location: Vec<(NumaNodeId, SocketId, ServerId)>,
    node_location: Vec<(SocketId, ServerId)>,
    llc_groups: Vec<Vec<CoreId>>,
    core_llc_group: Vec<usize>,
}

impl Topology {
    /// Builds a topology from servers plus an already validated distance
    /// matrix, deriving all lookup tables. Ids must already be dense and
    /// in document order.
    fn assemble(
        servers: Vec<Server>,
        distance: DistanceMatrix,
        llc_scope: LlcScope,
    ) -> Result<Self, TopologyError> {
        if servers.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut core_location = Vec::new();
        let mut node_location = Vec::new();
        for server in &servers {
            if server.sockets.is_empty() {
                return Err(TopologyError::Malformed(format!(
                    "server {} has no sockets",
                    server.id
                )));
            }
            for socket in &server.sockets {
                if socket.numa_nodes.is_empty() {
                    return Err(TopologyError::EmptySocket(socket.id.0));
                }
                for node in &socket.numa_nodes {
                    if node.cores.is_empty() {
                        return Err(TopologyError::EmptyNumaNode(node.id.0));
                    }
                    if node.memory_reserved > node.memory_capacity {
                        return Err(TopologyError::ReservationExceedsCapacity {
                            node: node.id.0,
                            reserved: node.memory_reserved,
                            capacity: node.memory_capacity,
                        });
                    }
                    node_location.push((socket.id, server.id));
                    for core in &node.cores {
                        debug_assert_eq!(core.0, core_location.len());
                        core_location.push((node.id, socket.id, server.id));
                    }
                }
            }
        }
        if distance.len() != node_location.len() {
            return Err(TopologyError::DistanceDimension {
                found: distance.len(),
                expected: node_location.len(),
            });
        }

        let mut llc_groups: Vec<Vec<CoreId>> = Vec::new();
        for server in &servers {
            for socket in &server.sockets {
                match llc_scope {
                    LlcScope::NumaNode => {
                        for node in &socket.numa_nodes {
                            llc_groups.push(node.cores.clone());
                        }
                    }
                    LlcScope::Socket => {
                        let cores = socket
                            .numa_nodes
                            .iter()
                            .flat_map(|n| n.cores.iter().copied())
                            .collect();
                        llc_groups.push(cores);
                    }
                }
            }
        }
        let mut core_llc_group = vec![usize::MAX; core_location.len()];
        for (gid, group) in llc_groups.iter().enumerate() {
            for core in group {
                core_llc_group[core.0] = gid;
            }
        }

        Ok(Self {
            servers,
            distance,
            llc_scope,
            core_location,
            node_location,
            llc_groups,
            core_llc_group,
        })
    }

    pub fn total_cores(&self) -> usize {
        self.core_location.len()
    }

    pub fn total_numa_nodes(&self) -> usize {
        self.node_location.len()
    }

    pub fn total_servers(&self) -> usize {
        self.servers.len()
    }

    pub fn total_memory(&self) -> u64 {
        self.numa_nodes().map(|n| n.memory_capacity).sum()
    }

    /// All NUMA nodes in id order.
    pub fn numa_nodes(&self) -> impl Iterator<Item = &NumaNode> {
        self.servers
            .iter()
            .flat_map(|s| s.sockets.iter())
            .flat_map(|s| s.numa_nodes.iter())
    }

    pub fn numa_node(&self, id: NumaNodeId) -> Result<&NumaNode, TopologyError> {
        self.numa_nodes()
            .nth(id.0)
            .ok_or(TopologyError::UnknownNumaNode(id.0))
    }

    /// NUMA distance between two nodes.
    pub fn distance(&self, a: NumaNodeId, b: NumaNodeId) -> Result<u32, TopologyError> {
        if a.0 >= self.distance.len() {
            return Err(TopologyError::UnknownNumaNode(a.0));
        }
        if b.0 >= self.distance.len() {
            return Err(TopologyError::UnknownNumaNode(b.0));
        }
        Ok(self.distance.get(a, b))
    }

    /// The containment chain of a core: (NUMA node, socket, server).
    pub fn locate(&self, core: CoreId) -> Result<(NumaNodeId, SocketId, ServerId), TopologyError> {
        self.core_location
            .get(core.0)
            .copied()
            .ok_or(TopologyError::UnknownCore(core.0))
    }

    pub fn node_of_core(&self, core: CoreId) -> NumaNodeId {
        self.core_location[core.0].0
    }

    pub fn socket_of_node(&self, node: NumaNodeId) -> SocketId {
        self.node_location[node.0].0
    }

    pub fn server_of_node(&self, node: NumaNodeId) -> ServerId {
        self.node_location[node.0].1
    }

    /// Cores sharing a last-level cache, one entry per LLC group.
    pub fn llc_groups(&self) -> &[Vec<CoreId>] {
        &self.llc_groups
    }

    /// Index into [`Self::llc_groups`] for the group containing `core`.
    pub fn llc_group_of(&self, core: CoreId) -> usize {
        self.core_llc_group[core.0]
    }

    /// Parses and validates a topology description document.
    ///
    /// An explicit distance matrix wins over torus-derived distances when
    /// both are present.
    pub fn load(document: &str) -> Result<Self, TopologyError> {
        let doc: doc::TopologyDoc =
            toml::from_str(document).map_err(|e| TopologyError::Malformed(e.to_string()))?;
        doc.build()
    }
}

/// Derives the distance matrix for servers laid out on a 2-D torus.
///
/// NUMA nodes on the same server get `local` / `neighbor_*` distances;
/// nodes on different servers get `one_hop` if the servers are adjacent on
/// the torus and `two_hop` otherwise.
pub fn torus_distances(
    servers: &[Server],
    dists: TorusDistances,
) -> Result<DistanceMatrix, TopologyError> {
    let node_count: usize = servers
        .iter()
        .flat_map(|s| &s.sockets)
        .map(|s| s.numa_nodes.len())
        .sum();
    // (server, socket) per node id.
    let mut loc = Vec::with_capacity(node_count);
    for server in servers {
        for socket in &server.sockets {
            for _ in &socket.numa_nodes {
                loc.push((server.id, socket.id, server.torus_coord));
            }
        }
    }

    let (grid_w, grid_h) = validate_torus_grid(servers)?;

    let mut d = vec![vec![0u32; node_count]; node_count];
    for i in 0..node_count {
        for j in 0..node_count {
            let (srv_i, sock_i, coord_i) = loc[i];
            let (srv_j, sock_j, coord_j) = loc[j];
            d[i][j] = if i == j {
                dists.local
            } else if srv_i == srv_j {
                if sock_i == sock_j {
                    dists.neighbor_same_socket
                } else {
                    dists.neighbor_cross_socket
                }
            } else if torus_hops(coord_i, coord_j, grid_w, grid_h) == 1 {
                dists.one_hop
            } else {
                dists.two_hop
            };
        }
    }
    DistanceMatrix::new(d, node_count)
}

/// Hop count between two coordinates on a wrapped w x h grid.
fn torus_hops(a: (i64, i64), b: (i64, i64), w: i64, h: i64) -> i64 {
    let dx = (a.0 - b.0).rem_euclid(w).min((b.0 - a.0).rem_euclid(w));
    let dy = (a.1 - b.1).rem_euclid(h).min((b.1 - a.1).rem_euclid(h));
    dx + dy
}

/// Checks uniqueness and that the coordinates fill a w x h rectangle.
fn validate_torus_grid(servers: &[Server]) -> Result<(i64, i64), TopologyError> {
    let coords: Vec<(i64, i64)> = servers.iter().map(|s| s.torus_coord).collect();
    let set: BTreeSet<(i64, i64)> = coords.iter().copied().collect();
    if set.len() != coords.len() {
        let dup = coords
            .iter()
            .enumerate()
            .find(|(i, c)| coords[..*i].contains(c))
            .map(|(_, c)| *c)
            .unwrap();
        return Err(TopologyError::DuplicateTorusCoord(dup.0, dup.1));
    }
    let w = coords.iter().map(|c| c.0).max().unwrap_or(0) + 1;
    let h = coords.iter().map(|c| c.1).max().unwrap_or(0) + 1;
    if w * h != coords.len() as i64 || coords.iter().any(|c| c.0 < 0 || c.1 < 0) {
        return Err(TopologyError::IncompleteTorusGrid);
    }
    Ok((w, h))
}

mod doc {
    //! Raw document schema for the topology description file.

    use serde::Deserialize;

    use super::*;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub(super) struct TopologyDoc {
        servers: Vec<ServerDoc>,
        #[serde(default)]
        distances: Option<DistancesDoc>,
        #[serde(default)]
        llc_scope: LlcScope,
        /// Treat SMT thread pairs as one schedulable core by halving the
        /// per-node core counts.
        #[serde(default)]
        merge_smt_threads: bool,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct ServerDoc {
        #[serde(default)]
        torus_coord: Option<(i64, i64)>,
        sockets: Vec<SocketDoc>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct SocketDoc {
        numa_nodes: Vec<NumaNodeDoc>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct NumaNodeDoc {
        cores: usize,
        memory_gb: u64,
        #[serde(default)]
        memory_reserved_gb: u64,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct DistancesDoc {
        #[serde(default)]
        explicit: Option<Vec<Vec<u32>>>,
        #[serde(default)]
        torus: Option<TorusDistancesDoc>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct TorusDistancesDoc {
        #[serde(default = "d_local")]
        local: u32,
        #[serde(default = "d_same_socket")]
        neighbor_same_socket: u32,
        #[serde(default = "d_cross_socket")]
        neighbor_cross_socket: u32,
        #[serde(default = "d_one_hop")]
        one_hop: u32,
        #[serde(default = "d_two_hop")]
        two_hop: u32,
    }

    fn d_local() -> u32 {
        DEFAULT_TORUS_DISTANCES.local
    }
    fn d_same_socket() -> u32 {
        DEFAULT_TORUS_DISTANCES.neighbor_same_socket
    }
    fn d_cross_socket() -> u32 {
        DEFAULT_TORUS_DISTANCES.neighbor_cross_socket
    }
    fn d_one_hop() -> u32 {
        DEFAULT_TORUS_DISTANCES.one_hop
    }
    fn d_two_hop() -> u32 {
        DEFAULT_TORUS_DISTANCES.two_hop
    }

    impl TorusDistancesDoc {
        fn into_params(self) -> TorusDistances {
            TorusDistances {
                local: self.local,
                neighbor_same_socket: self.neighbor_same_socket,
                neighbor_cross_socket: self.neighbor_cross_socket,
                one_hop: self.one_hop,
                two_hop: self.two_hop,
            }
        }
    }

    impl TopologyDoc {
        pub(super) fn build(self) -> Result<Topology, TopologyError> {
            if self.servers.is_empty() {
                return Err(TopologyError::Empty);
            }
            let single_server = self.servers.len() == 1;

            // Dense ids in document order.
            let mut servers = Vec::new();
            let mut next_socket = 0usize;
            let mut next_node = 0usize;
            let mut next_core = 0usize;
            for (sid, sdoc) in self.servers.into_iter().enumerate() {
                let torus_coord = match sdoc.torus_coord {
                    Some(c) => c,
                    None if single_server => (0, 0),
                    None => return Err(TopologyError::MissingTorusCoord(sid)),
                };
                let mut sockets = Vec::new();
                for sockdoc in sdoc.sockets {
                    let socket_id = SocketId(next_socket);
                    next_socket += 1;
                    let mut numa_nodes = Vec::new();
                    for ndoc in sockdoc.numa_nodes {
                        let node_id = NumaNodeId(next_node);
                        next_node += 1;
                        let core_count = if self.merge_smt_threads {
                            if ndoc.cores % 2 != 0 {
                                return Err(TopologyError::OddSmtCoreCount(node_id.0));
                            }
                            ndoc.cores / 2
                        } else {
                            ndoc.cores
                        };
                        let cores = (0..core_count)
                            .map(|_| {
                                let c = CoreId(next_core);
                                next_core += 1;
                                c
                            })
                            .collect();
                        numa_nodes.push(NumaNode {
                            id: node_id,
                            cores,
                            memory_capacity: ndoc.memory_gb * GIB,
                            memory_reserved: ndoc.memory_reserved_gb * GIB,
                        });
                    }
                    sockets.push(Socket {
                        id: socket_id,
                        numa_nodes,
                    });
                }
                servers.push(Server {
                    id: ServerId(sid),
                    torus_coord,
                    sockets,
                });
            }

            let distance = match self.distances {
                Some(DistancesDoc {
                    explicit: Some(matrix),
                    ..
                }) => DistanceMatrix::new(matrix, next_node)?,
                Some(DistancesDoc {
                    explicit: None,
                    torus: Some(t),
                }) => torus_distances(&servers, t.into_params())?,
                Some(DistancesDoc {
                    explicit: None,
                    torus: None,
                })
                | None => torus_distances(&servers, TorusDistances::default())?,
            };

            Topology::assemble(servers, distance, self.llc_scope)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const REFERENCE: &str =
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference-numascale.topo"));

    fn reference() -> Topology {
        Topology::load(REFERENCE).unwrap()
    }

    #[test]
    fn reference_config_totals() {
        let t = reference();
        assert_eq!(t.total_cores(), 288);
        assert_eq!(t.total_numa_nodes(), 36);
        assert_eq!(t.total_servers(), 6);
        assert_eq!(t.total_memory(), 36 * 32 * GIB);
    }

    #[test]
    fn single_node_defaults_to_local_distance() {
        let doc = r#"
            [[servers]]
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 4
            memory_gb = 8
        "#;
        let t = Topology::load(doc).unwrap();
        assert_eq!(t.distance.rows(), &[vec![10]]);
        assert_eq!(t.total_cores(), 4);
    }

    #[test]
    fn asymmetric_explicit_matrix_rejected() {
        let doc = r#"
            [distances]
            explicit = [[10, 16], [22, 10]]

            [[servers]]
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
        "#;
        let err = Topology::load(doc).unwrap_err();
        assert!(matches!(err, TopologyError::AsymmetricDistance { .. }), "{err}");
    }

    #[test]
    fn explicit_matrix_wins_over_torus() {
        let doc = r#"
            [distances]
            explicit = [[10, 40], [40, 10]]
            [distances.torus]
            one_hop = 160

            [[servers]]
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
        "#;
        let t = Topology::load(doc).unwrap();
        assert_eq!(t.distance(NumaNodeId(0), NumaNodeId(1)).unwrap(), 40);
    }

    #[test]
    fn sub_local_distance_rejected() {
        let doc = r#"
            [distances]
            explicit = [[10, 8], [8, 10]]

            [[servers]]
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
        "#;
        assert!(matches!(
            Topology::load(doc).unwrap_err(),
            TopologyError::SubLocalDistance { .. }
        ));
    }

    #[test]
    fn torus_distance_tiers() {
        let t = reference();
        // Same NUMA node.
        assert_eq!(t.distance(NumaNodeId(3), NumaNodeId(3)).unwrap(), 10);
        // Same socket (nodes 0 and 1 are the two nodes of socket 0).
        assert_eq!(t.distance(NumaNodeId(0), NumaNodeId(1)).unwrap(), 16);
        // Same server, different socket.
        assert_eq!(t.distance(NumaNodeId(0), NumaNodeId(2)).unwrap(), 22);
        // Adjacent servers on the 3x2 torus: server 0 at (0,0), server 1 at (1,0).
        assert_eq!(t.distance(NumaNodeId(0), NumaNodeId(6)).unwrap(), 160);
        // Two hops: server 0 at (0,0), server 4 at (1,1).
        assert_eq!(t.distance(NumaNodeId(0), NumaNodeId(24)).unwrap(), 200);
    }

    #[test]
    fn torus_distances_are_symmetric_and_bounded() {
        let t = reference();
        let n = t.total_numa_nodes();
        for i in 0..n {
            for j in 0..n {
                let dij = t.distance(NumaNodeId(i), NumaNodeId(j)).unwrap();
                let dji = t.distance(NumaNodeId(j), NumaNodeId(i)).unwrap();
                assert_eq!(dij, dji);
                assert!([10, 16, 22, 160, 200].contains(&dij), "unexpected distance {dij}");
                if i == j {
                    assert_eq!(dij, 10);
                } else {
                    assert!(dij > 10);
                }
            }
        }
    }

    #[test]
    fn locate_reference_cores() {
        let t = reference();
        assert_eq!(
            t.locate(CoreId(0)).unwrap(),
            (NumaNodeId(0), SocketId(0), ServerId(0))
        );
        // Core 47 is the last core of server 0: NUMA node 5, socket 2.
        assert_eq!(
            t.locate(CoreId(47)).unwrap(),
            (NumaNodeId(5), SocketId(2), ServerId(0))
        );
        assert!(matches!(
            t.locate(CoreId(288)),
            Err(TopologyError::UnknownCore(288))
        ));
    }

    #[test]
    fn locate_partitions_cores_by_node() {
        let t = reference();
        for node in t.numa_nodes() {
            for core in &node.cores {
                assert_eq!(t.locate(*core).unwrap().0, node.id);
            }
        }
        let mut seen = 0;
        for node in t.numa_nodes() {
            seen += node.cores.len();
        }
        assert_eq!(seen, t.total_cores());
    }

    #[test]
    fn llc_groups_default_to_numa_nodes() {
        let t = reference();
        assert_eq!(t.llc_groups().len(), 36);
        assert!(t.llc_groups().iter().all(|g| g.len() == 8));
        assert_eq!(t.llc_group_of(CoreId(0)), t.llc_group_of(CoreId(7)));
        assert_ne!(t.llc_group_of(CoreId(0)), t.llc_group_of(CoreId(8)));
    }

    #[test]
    fn llc_scope_socket_groups_both_nodes() {
        let doc = r#"
            llc_scope = "socket"

            [[servers]]
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
        "#;
        let t = Topology::load(doc).unwrap();
        assert_eq!(t.llc_groups().len(), 1);
        assert_eq!(t.llc_group_of(CoreId(0)), t.llc_group_of(CoreId(3)));
    }

    #[test]
    fn merge_smt_threads_halves_cores() {
        let doc = r#"
            merge_smt_threads = true

            [[servers]]
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 8
            memory_gb = 4
        "#;
        let t = Topology::load(doc).unwrap();
        assert_eq!(t.total_cores(), 4);
    }

    #[test]
    fn missing_torus_coord_with_multiple_servers() {
        let doc = r#"
            [[servers]]
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4

            [[servers]]
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
        "#;
        assert!(matches!(
            Topology::load(doc).unwrap_err(),
            TopologyError::MissingTorusCoord(_)
        ));
    }

    #[test]
    fn duplicate_torus_coord_rejected() {
        let doc = r#"
            [[servers]]
            torus_coord = [0, 0]
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4

            [[servers]]
            torus_coord = [0, 0]
            [[servers.sockets]]
            [[servers.sockets.numa_nodes]]
            cores = 2
            memory_gb = 4
        "#;
        assert!(matches!(
            Topology::load(doc).unwrap_err(),
            TopologyError::DuplicateTorusCoord(0, 0)
        ));
    }
}
