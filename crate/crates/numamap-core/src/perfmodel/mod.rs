//! Synthetic performance model: a VM's relative performance is the
//! product of a cache-contention factor (per co-located VM on a shared
//! LLC group), a memory-locality factor (linear in normalized NUMA
//! distance), an overbooking factor (fair time-sharing of cores), and
//! multiplicative log-normal noise. Solo at ideal locality is 1.0 by
//! construction. IPC and MPI counter samples are synthesized from the
//! estimate so the control loop can consume either metric.

mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapper::MappingState;
use crate::topology::Topology;
use crate::workload::{AnimalClass, VmId, VmSpec};

pub use oracle::{oracle_best_mapping, OracleError};

/// Guards the division when deriving MPI from very small p.
pub const MPI_EPSILON: f64 = 1e-6;

/// The shipped default calibration.
pub const DEFAULT_PERF_DOC: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.perf"));

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("malformed perf-params document: {0}")]
    Malformed(String),
    #[error("{key} = {value} outside (0, 1]")]
    FactorOutOfRange { key: String, value: f64 },
    #[error("{key} = {value} outside [0, 1)")]
    WeightOutOfRange { key: String, value: f64 },
    #[error("{key} = {value} must be positive")]
    NonPositive { key: String, value: f64 },
    #[error("noise_sigma = {0} must be >= 0")]
    NegativeSigma(f64),
    #[error("VM {0} is not mapped")]
    NotMapped(VmId),
    #[error("VM {0} has no memory placement recorded")]
    NoMemory(VmId),
}

/// Calibration of the performance model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerfParams {
    // [source class][victim class]
    contention: [[f64; 3]; 3],
    // [class][sensitive as 0/1]
    locality_weight: [[f64; 2]; 3],
    ipc_base: [f64; 3],
    mpi_base: [f64; 3],
    pub noise_sigma: f64,
    /// Exponent on the normalized distance; 1.0 is linear.
    pub locality_exponent: f64,
}

fn idx(c: AnimalClass) -> usize {
    match c {
        AnimalClass::Sheep => 0,
        AnimalClass::Rabbit => 1,
        AnimalClass::Devil => 2,
    }
}

impl PerfParams {
    /// Multiplicative penalty a `victim` pays per co-located `source`.
    pub fn contention_penalty(&self, source: AnimalClass, victim: AnimalClass) -> f64 {
        self.contention[idx(source)][idx(victim)]
    }

    /// Maximum fractional slowdown at the far end of the distance matrix.
    pub fn locality_weight(&self, class: AnimalClass, sensitive: bool) -> f64 {
        self.locality_weight[idx(class)][sensitive as usize]
    }

    pub fn ipc_base(&self, class: AnimalClass) -> f64 {
        self.ipc_base[idx(class)]
    }

    pub fn mpi_base(&self, class: AnimalClass) -> f64 {
        self.mpi_base[idx(class)]
    }

    pub fn with_noise_sigma(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    /// Parses and validates a perf-params document.
    pub fn load(document: &str) -> Result<Self, PerfError> {
        let doc: doc::PerfDoc =
            toml::from_str(document).map_err(|e| PerfError::Malformed(e.to_string()))?;
        doc.build()
    }
}

impl Default for PerfParams {
    fn default() -> Self {
        PerfParams::load(DEFAULT_PERF_DOC).expect("shipped defaults parse")
    }
}

/// Relative performance of one VM for one decision interval, with the
/// factor breakdown that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfEstimate {
    pub vm: VmId,
    /// contention × locality × overbooking × noise.
    pub p: f64,
    pub contention: f64,
    pub locality: f64,
    pub overbooking: f64,
    pub noise: f64,
}

/// Synthetic hardware counters for one VM and interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterSample {
    pub vm: VmId,
    pub ipc: f64,
    pub mpi: f64,
}

/// Product over distinct co-located VMs (sharing any LLC group) of the
/// directed contention penalty; 1.0 for a VM alone on its groups.
pub fn contention_factor(
    vm: &VmSpec,
    m: &MappingState,
    t: &Topology,
    live: &BTreeMap<VmId, VmSpec>,
    params: &PerfParams,
) -> Result<f64, PerfError> {
    let cores = m
        .cores_of(&vm.id)
        .ok_or_else(|| PerfError::NotMapped(vm.id.clone()))?;
    let groups: BTreeSet<usize> = cores.iter().map(|c| t.llc_group_of(*c)).collect();
    let residents = m.llc_residents(t);
    let mut others: BTreeSet<&VmId> = BTreeSet::new();
    for g in groups {
        for id in &residents[g] {
            if *id != vm.id {
                others.insert(id);
            }
        }
    }
    let mut factor = 1.0;
    for id in others {
        if let Some(other) = live.get(id) {
            factor *= params.contention_penalty(other.class, vm.class);
        }
    }
    Ok(factor)
}

/// 1 − w · D_norm^e, where D_norm is the memory-weighted mean distance
/// from the VM's vCPUs to its memory, normalized so that all-local is 0
/// and the matrix maximum is 1.
pub fn locality_factor(
    vm: &VmSpec,
    m: &MappingState,
    t: &Topology,
    params: &PerfParams,
) -> Result<f64, PerfError> {
    let cores = m
        .cores_of(&vm.id)
        .ok_or_else(|| PerfError::NotMapped(vm.id.clone()))?;
    let alloc = m
        .memory_of(&vm.id)
        .ok_or_else(|| PerfError::NoMemory(vm.id.clone()))?;
    if alloc.values().sum::<u64>() == 0 {
        return Err(PerfError::NoMemory(vm.id.clone()));
    }
    let mut spread = BTreeMap::new();
    for c in cores {
        *spread.entry(t.node_of_core(*c)).or_insert(0u32) += 1;
    }
    let local = t.distance.local() as f64;
    let max = t.distance.max() as f64;
    let avg = {
        let vcpus: u32 = spread.values().sum();
        let bytes: u64 = alloc.values().sum();
        let mut acc = 0.0;
        for (host, count) in &spread {
            for (node, b) in alloc {
                acc += *count as f64 * *b as f64 * t.distance.get(*host, *node) as f64;
            }
        }
        acc / (vcpus as f64 * bytes as f64)
    };
    let d_norm = if max > local { ((avg - local) / (max - local)).clamp(0.0, 1.0) } else { 0.0 };
    let w = params.locality_weight(vm.class, vm.sensitive);
    Ok(1.0 - w * d_norm.powf(params.locality_exponent))
}

/// Mean over the VM's vCPUs of 1 / (vCPUs time-sharing that core).
pub fn overbooking_factor(vm: &VmSpec, m: &MappingState) -> Result<f64, PerfError> {
    let cores = m
        .cores_of(&vm.id)
        .ok_or_else(|| PerfError::NotMapped(vm.id.clone()))?;
    let sum: f64 = cores.iter().map(|c| 1.0 / m.occupancy(*c) as f64).sum();
    Ok(sum / cores.len() as f64)
}

/// Composes the three factors with multiplicative log-normal noise.
pub fn estimate_perf(
    vm: &VmSpec,
    m: &MappingState,
    t: &Topology,
    live: &BTreeMap<VmId, VmSpec>,
    params: &PerfParams,
    rng: &mut impl Rng,
) -> Result<PerfEstimate, PerfError> {
    estimate_perf_biased(vm, m, t, live, params, rng, 1.0)
}

/// [`estimate_perf`] with an extra multiplier folded into the noise term.
/// The simulator uses it for the run-persistent placement luck of the
/// vanilla scheduler; everything else passes 1.0.
pub fn estimate_perf_biased(
    vm: &VmSpec,
    m: &MappingState,
    t: &Topology,
    live: &BTreeMap<VmId, VmSpec>,
    params: &PerfParams,
    rng: &mut impl Rng,
    bias: f64,
) -> Result<PerfEstimate, PerfError> {
    let contention = contention_factor(vm, m, t, live, params)?;
    let locality = locality_factor(vm, m, t, params)?;
    let overbooking = overbooking_factor(vm, m)?;
    let noise = bias
        * if params.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, params.noise_sigma).expect("validated sigma");
            normal.sample(rng).exp()
        } else {
            1.0
        };
    Ok(PerfEstimate {
        vm: vm.id.clone(),
        p: contention * locality * overbooking * noise,
        contention,
        locality,
        overbooking,
        noise,
    })
}

/// Synthesizes IPC and MPI from an estimate: IPC scales linearly with p,
/// MPI inversely, with extra misses the more contended the VM is.
pub fn sample_counters(est: &PerfEstimate, vm: &VmSpec, params: &PerfParams) -> CounterSample {
    let ipc = params.ipc_base(vm.class) * est.p;
    let extra_misses = 1.0 + (1.0 - est.contention);
    let mpi = params.mpi_base(vm.class) / est.p.max(MPI_EPSILON) * extra_misses;
    CounterSample {
        vm: vm.id.clone(),
        ipc,
        mpi,
    }
}

/// Relative performance as the control loop sees it through a counter,
/// normalized so a solo run reads 1.0.
pub fn measured_perf(metric: crate::mapper::Metric, sample: &CounterSample, class: AnimalClass, params: &PerfParams) -> f64 {
    match metric {
        crate::mapper::Metric::Ipc => sample.ipc / params.ipc_base(class),
        crate::mapper::Metric::Mpi => params.mpi_base(class) / sample.mpi.max(MPI_EPSILON),
    }
}

mod doc {
    use serde::Deserialize;

    use super::*;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub(super) struct PerfDoc {
        contention: ContentionDoc,
        locality_weight: LocalityDoc,
        ipc_base: ClassValues,
        mpi_base: ClassValues,
        noise_sigma: f64,
        #[serde(default = "one")]
        locality_exponent: f64,
    }

    fn one() -> f64 {
        1.0
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct ContentionDoc {
        sheep_to_sheep: f64,
        sheep_to_rabbit: f64,
        sheep_to_devil: f64,
        rabbit_to_sheep: f64,
        rabbit_to_rabbit: f64,
        rabbit_to_devil: f64,
        devil_to_sheep: f64,
        devil_to_rabbit: f64,
        devil_to_devil: f64,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct LocalityDoc {
        sheep_sensitive: f64,
        sheep_insensitive: f64,
        rabbit_sensitive: f64,
        rabbit_insensitive: f64,
        devil_sensitive: f64,
        devil_insensitive: f64,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct ClassValues {
        sheep: f64,
        rabbit: f64,
        devil: f64,
    }

    impl PerfDoc {
        pub(super) fn build(self) -> Result<PerfParams, PerfError> {
            let c = &self.contention;
            let contention = [
                [c.sheep_to_sheep, c.sheep_to_rabbit, c.sheep_to_devil],
                [c.rabbit_to_sheep, c.rabbit_to_rabbit, c.rabbit_to_devil],
                [c.devil_to_sheep, c.devil_to_rabbit, c.devil_to_devil],
            ];
            for (i, row) in contention.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if !(*v > 0.0 && *v <= 1.0) {
                        return Err(PerfError::FactorOutOfRange {
                            key: format!("contention[{i}][{j}]"),
                            value: *v,
                        });
                    }
                }
            }
            let l = &self.locality_weight;
            let locality_weight = [
                [l.sheep_insensitive, l.sheep_sensitive],
                [l.rabbit_insensitive, l.rabbit_sensitive],
                [l.devil_insensitive, l.devil_sensitive],
            ];
            for (i, row) in locality_weight.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if !(*v >= 0.0 && *v < 1.0) {
                        return Err(PerfError::WeightOutOfRange {
                            key: format!("locality_weight[{i}][{j}]"),
                            value: *v,
                        });
                    }
                }
            }
            let ipc_base = [self.ipc_base.sheep, self.ipc_base.rabbit, self.ipc_base.devil];
            let mpi_base = [self.mpi_base.sheep, self.mpi_base.rabbit, self.mpi_base.devil];
            for (name, v) in [("ipc_base", &ipc_base), ("mpi_base", &mpi_base)] {
                for x in v.iter() {
                    if !(*x > 0.0) {
                        return Err(PerfError::NonPositive {
                            key: name.to_string(),
                            value: *x,
                        });
                    }
                }
            }
            if self.noise_sigma < 0.0 {
                return Err(PerfError::NegativeSigma(self.noise_sigma));
            }
            if !(self.locality_exponent > 0.0) {
                return Err(PerfError::NonPositive {
                    key: "locality_exponent".to_string(),
                    value: self.locality_exponent,
                });
            }
            Ok(PerfParams {
                contention,
                locality_weight,
                ipc_base,
                mpi_base,
                noise_sigma: self.noise_sigma,
                locality_exponent: self.locality_exponent,
            })
        }
    }
}
