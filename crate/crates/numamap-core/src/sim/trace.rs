//! Replayable run traces: one record per epoch plus a summary, serialized
//! as newline-delimited JSON. The trace hash covers the serialized epoch
//! records, so two runs are interchangeable exactly when their hashes
//! match.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mapper::Action;
use crate::topology::CoreId;
use crate::workload::{AnimalClass, VmId, VmSpec};

use super::{vm_type_name, RunConfig, SimError};

/// Identity of a VM for reporting, kept in the trace so reports do not
/// need the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmMeta {
    pub vm_type: String,
    pub class: AnimalClass,
    pub sensitive: bool,
    pub expected_perf: f64,
}

impl VmMeta {
    pub(super) fn of(spec: &VmSpec) -> Self {
        VmMeta {
            vm_type: vm_type_name(spec),
            class: spec.class,
            sensitive: spec.sensitive,
            expected_perf: spec.expected_perf,
        }
    }
}

/// Performance of one VM in one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmEpochRecord {
    pub p: f64,
    pub contention: f64,
    pub locality: f64,
    pub overbooking: f64,
    pub noise: f64,
    pub ipc: f64,
    pub mpi: f64,
}

/// Everything that happened in one decision interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub mapping_hash: String,
    /// Core ids per live VM, the full snapshot.
    pub mapping: BTreeMap<VmId, Vec<CoreId>>,
    pub vms: BTreeMap<VmId, VmEpochRecord>,
    pub actions: Vec<Action>,
    pub warnings: Vec<String>,
}

impl EpochRecord {
    pub(super) fn new(
        epoch: u64,
        mapping: BTreeMap<VmId, Vec<CoreId>>,
        vms: BTreeMap<VmId, VmEpochRecord>,
        actions: Vec<Action>,
        warnings: Vec<String>,
    ) -> Self {
        let mapping_hash = hash_hex(&serde_json::to_vec(&mapping).expect("mapping serializes"));
        EpochRecord {
            epoch,
            mapping_hash,
            mapping,
            vms,
            actions,
            warnings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub warmup: u64,
    /// Mean p per VM over the epochs after warm-up in which it was live.
    pub mean_p: BTreeMap<VmId, f64>,
    pub vm_meta: BTreeMap<VmId, VmMeta>,
    /// SHA-256 over the serialized epoch records.
    pub trace_hash: String,
}

/// A full deterministic run: config echo, per-epoch records, summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub config: RunConfig,
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", content = "data", rename_all = "snake_case")]
enum TraceLine {
    Config(RunConfig),
    Epoch(EpochRecord),
    Summary(RunSummary),
}

impl RunTrace {
    pub(super) fn assemble(
        config: RunConfig,
        epochs: Vec<EpochRecord>,
        vm_meta: BTreeMap<VmId, VmMeta>,
    ) -> Self {
        let mut acc: BTreeMap<VmId, (f64, u64)> = BTreeMap::new();
        for rec in epochs.iter().filter(|r| r.epoch >= config.warmup) {
            for (vm, v) in &rec.vms {
                let e = acc.entry(vm.clone()).or_insert((0.0, 0));
                e.0 += v.p;
                e.1 += 1;
            }
        }
        let mean_p = acc
            .into_iter()
            .map(|(vm, (sum, n))| (vm, sum / n as f64))
            .collect();

        let mut hasher = Sha256::new();
        for rec in &epochs {
            hasher.update(serde_json::to_vec(rec).expect("epoch serializes"));
            hasher.update(b"\n");
        }
        let trace_hash = to_hex(&hasher.finalize());

        let summary = RunSummary {
            seed: config.seed,
            warmup: config.warmup,
            mean_p,
            vm_meta,
            trace_hash,
        };
        RunTrace {
            config,
            epochs,
            summary,
        }
    }

    /// Serializes the trace as newline-delimited JSON records.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        let mut push = |line: &TraceLine| {
            out.push_str(&serde_json::to_string(line).expect("trace serializes"));
            out.push('\n');
        };
        push(&TraceLine::Config(self.config.clone()));
        for e in &self.epochs {
            push(&TraceLine::Epoch(e.clone()));
        }
        push(&TraceLine::Summary(self.summary.clone()));
        out
    }

    /// Parses one or more concatenated traces from NDJSON (a multi-repeat
    /// run writes its repeats back to back).
    pub fn from_ndjson(input: &str) -> Result<Vec<RunTrace>, SimError> {
        let mut traces = Vec::new();
        let mut config: Option<RunConfig> = None;
        let mut epochs: Vec<EpochRecord> = Vec::new();
        for (i, line) in input.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = serde_json::from_str(line)
                .map_err(|e| SimError::MalformedTrace(format!("line {}: {e}", i + 1)))?;
            match parsed {
                TraceLine::Config(c) => {
                    if config.is_some() {
                        return Err(SimError::MalformedTrace(format!(
                            "line {}: config before previous summary",
                            i + 1
                        )));
                    }
                    config = Some(c);
                }
                TraceLine::Epoch(e) => {
                    if config.is_none() {
                        return Err(SimError::MalformedTrace(format!(
                            "line {}: epoch before config",
                            i + 1
                        )));
                    }
                    epochs.push(e);
                }
                TraceLine::Summary(s) => {
                    let Some(c) = config.take() else {
                        return Err(SimError::MalformedTrace(format!(
                            "line {}: summary before config",
                            i + 1
                        )));
                    };
                    traces.push(RunTrace {
                        config: c,
                        epochs: std::mem::take(&mut epochs),
                        summary: s,
                    });
                }
            }
        }
        if config.is_some() {
            return Err(SimError::MalformedTrace("trace ends without summary".into()));
        }
        if traces.is_empty() {
            return Err(SimError::MalformedTrace("no trace records found".into()));
        }
        Ok(traces)
    }
}

fn hash_hex(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
