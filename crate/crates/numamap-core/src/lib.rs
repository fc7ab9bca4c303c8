//! NUMA-aware VM-to-core mapping for disaggregated shared-memory machines.
//!
//! The crate models a multi-server system that behaves as a single
//! cache-coherent machine, and provides:
//!
//! - [`topology`]: the hardware resource layout (servers, sockets, NUMA
//!   nodes, cores) with a NUMA distance matrix, loadable from a
//!   description file.
//! - [`workload`]: VM specifications with interference classes
//!   (sheep / rabbit / devil), remote-memory sensitivity, and scenario
//!   files describing arrivals and departures over time.
//! - [`perfmodel`]: a synthetic performance model composing cache
//!   contention, memory locality, and core overbooking into a relative
//!   performance value per VM, plus IPC/MPI counter synthesis and a
//!   brute-force placement oracle for small instances.
//! - [`mapper`]: the two-stage mapping algorithm — arrival placement with
//!   minimal slicing, deviation detection, neighbor-aware remapping and
//!   a benefit matrix that is updated online — and the vanilla baseline
//!   scheduler it is compared against.
//! - [`sim`]: a discrete-time harness that drives scenarios through a
//!   chosen algorithm, samples the performance model, and aggregates
//!   statistics across repeated runs.

pub mod mapper;
pub mod perfmodel;
pub mod sim;
pub mod topology;
pub mod workload;

pub use mapper::{AlgoConfig, BenefitMatrix, ClassMatrix, MappingState};
pub use perfmodel::{CounterSample, PerfEstimate, PerfParams};
pub use sim::{Algorithm, RunConfig, RunStats, RunTrace};
pub use topology::{CoreId, NumaNodeId, ServerId, SocketId, Topology};
pub use workload::{AnimalClass, ScenarioEvent, VmId, VmSpec};
