//! VM specifications, interference classes, and scenario ingestion.
//!
//! Classification follows the animal scheme: sheep are gentle and barely
//! affected by cache sharing, rabbits degrade quickly when their cache is
//! disturbed, and devils thrash the cache and hurt their neighbors. A VM
//! is additionally either sensitive or insensitive to remote memory.
//! Classification is static for the lifetime of a run.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{ServerId, GIB};

/// Interference class of a VM's workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnimalClass {
    Sheep,
    Rabbit,
    Devil,
}

impl AnimalClass {
    pub const ALL: [AnimalClass; 3] = [AnimalClass::Sheep, AnimalClass::Rabbit, AnimalClass::Devil];

    pub fn as_str(&self) -> &'static str {
        match self {
            AnimalClass::Sheep => "sheep",
            AnimalClass::Rabbit => "rabbit",
            AnimalClass::Devil => "devil",
        }
    }

    /// How much damage a neighbor of this class tends to cause, used to
    /// rank interferers (devils worst, sheep harmless).
    pub fn damage_rank(&self) -> u8 {
        match self {
            AnimalClass::Devil => 2,
            AnimalClass::Rabbit => 1,
            AnimalClass::Sheep => 0,
        }
    }
}

impl fmt::Display for AnimalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// VM identifier as given in the scenario document.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VmId(pub String);

impl VmId {
    pub fn new(id: impl Into<String>) -> Self {
        VmId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VmId {
    fn from(s: &str) -> Self {
        VmId(s.to_string())
    }
}

/// A virtual machine to be mapped onto the topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmSpec {
    pub id: VmId,
    pub vcpus: u32,
    /// Memory demand in bytes.
    pub memory: u64,
    pub class: AnimalClass,
    /// Whether performance degrades materially with remote memory.
    pub sensitive: bool,
    /// Expected relative performance; 1.0 is the solo run at ideal
    /// locality by construction.
    pub expected_perf: f64,
    /// Optional server-pinning constraint: when set, the VM's vCPUs may
    /// only be placed on these servers.
    pub affinity_servers: Option<BTreeSet<ServerId>>,
}

impl VmSpec {
    pub fn new(id: impl Into<String>, vcpus: u32, memory: u64, class: AnimalClass) -> Self {
        VmSpec {
            id: VmId::new(id),
            vcpus,
            memory,
            class,
            sensitive: false,
            expected_perf: 1.0,
            affinity_servers: None,
        }
    }

    pub fn sensitive(mut self, sensitive: bool) -> Self {
        self.sensitive = sensitive;
        self
    }

    pub fn expected_perf(mut self, p: f64) -> Self {
        self.expected_perf = p;
        self
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        if self.vcpus < 1 {
            return Err(ScenarioError::InvalidVm(format!("{}: vcpus must be >= 1", self.id)));
        }
        if self.memory == 0 {
            return Err(ScenarioError::InvalidVm(format!("{}: memory must be > 0", self.id)));
        }
        if !(self.expected_perf > 0.0) {
            return Err(ScenarioError::InvalidVm(format!(
                "{}: expected_perf must be > 0",
                self.id
            )));
        }
        Ok(())
    }
}

/// The fixed VM sizing table used by the experiment scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmTypePreset {
    pub name: &'static str,
    pub vcpus: u32,
    pub memory: u64,
}

pub const PRESETS: [VmTypePreset; 4] = [
    VmTypePreset { name: "small", vcpus: 4, memory: 16 * GIB },
    VmTypePreset { name: "medium", vcpus: 8, memory: 32 * GIB },
    VmTypePreset { name: "large", vcpus: 16, memory: 64 * GIB },
    VmTypePreset { name: "huge", vcpus: 72, memory: 288 * GIB },
];

/// Looks up a sizing preset by name.
pub fn preset(name: &str) -> Result<VmTypePreset, ScenarioError> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .copied()
        .ok_or_else(|| ScenarioError::UnknownPreset(name.to_string()))
}

/// One arrival or departure at a decision-interval index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioEvent {
    Arrive { time: u64, vm: VmSpec },
    Depart { time: u64, vm: VmId },
}

impl ScenarioEvent {
    pub fn time(&self) -> u64 {
        match self {
            ScenarioEvent::Arrive { time, .. } | ScenarioEvent::Depart { time, .. } => *time,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("malformed scenario document: {0}")]
    Malformed(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("custom VM type requires vcpus and memory_gb ({0})")]
    IncompleteCustomType(VmId),
    #[error("event at time {found} after time {previous}: times must be non-decreasing")]
    TimeOrder { previous: u64, found: u64 },
    #[error("negative time {0}")]
    NegativeTime(i64),
    #[error("departure of unknown or not-live VM {0}")]
    DepartUnknown(VmId),
    #[error("arrival of already-live VM id {0}")]
    DuplicateArrival(VmId),
    #[error("invalid VM: {0}")]
    InvalidVm(String),
}

/// Parses and validates a scenario document into a time-ordered event list.
pub fn parse_scenario(document: &str) -> Result<Vec<ScenarioEvent>, ScenarioError> {
    let doc: doc::ScenarioDoc =
        toml::from_str(document).map_err(|e| ScenarioError::Malformed(e.to_string()))?;
    doc.build()
}

/// Serializes an event list back into the scenario document format.
/// Re-parsing the output yields the identical list.
pub fn render_scenario(events: &[ScenarioEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str("[[events]]\n");
        match ev {
            ScenarioEvent::Arrive { time, vm } => {
                out.push_str(&format!("time = {time}\n"));
                out.push_str("action = \"arrive\"\n");
                out.push_str(&format!("id = {:?}\n", vm.id.as_str()));
                out.push_str("type = \"custom\"\n");
                out.push_str(&format!("vcpus = {}\n", vm.vcpus));
                out.push_str(&format!("memory_gb = {}\n", vm.memory / GIB));
                out.push_str(&format!("class = \"{}\"\n", vm.class));
                out.push_str(&format!("sensitive = {}\n", vm.sensitive));
                out.push_str(&format!("expected_perf = {:?}\n", vm.expected_perf));
                if let Some(servers) = &vm.affinity_servers {
                    let ids: Vec<String> = servers.iter().map(|s| s.0.to_string()).collect();
                    out.push_str(&format!("affinity_servers = [{}]\n", ids.join(", ")));
                }
            }
            ScenarioEvent::Depart { time, vm } => {
                out.push_str(&format!("time = {time}\n"));
                out.push_str("action = \"depart\"\n");
                out.push_str(&format!("id = {:?}\n", vm.as_str()));
            }
        }
        out.push('\n');
    }
    out
}

mod doc {
    use serde::Deserialize;

    use super::*;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub(super) struct ScenarioDoc {
        #[serde(default)]
        events: Vec<EventDoc>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct EventDoc {
        time: i64,
        action: Action,
        id: String,
        #[serde(rename = "type", default)]
        vm_type: Option<String>,
        #[serde(default)]
        vcpus: Option<u32>,
        #[serde(default)]
        memory_gb: Option<u64>,
        #[serde(default)]
        class: Option<AnimalClass>,
        #[serde(default)]
        sensitive: Option<bool>,
        #[serde(default)]
        expected_perf: Option<f64>,
        #[serde(default)]
        affinity_servers: Option<Vec<usize>>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(rename_all = "snake_case")]
    enum Action {
        Arrive,
        Depart,
    }

    impl ScenarioDoc {
        pub(super) fn build(self) -> Result<Vec<ScenarioEvent>, ScenarioError> {
            let mut events = Vec::with_capacity(self.events.len());
            let mut live: BTreeSet<VmId> = BTreeSet::new();
            let mut previous_time: Option<u64> = None;
            for ev in self.events {
                if ev.time < 0 {
                    return Err(ScenarioError::NegativeTime(ev.time));
                }
                let time = ev.time as u64;
                if let Some(prev) = previous_time {
                    if time < prev {
                        return Err(ScenarioError::TimeOrder { previous: prev, found: time });
                    }
                }
                previous_time = Some(time);
                let id = VmId::new(ev.id.clone());
                match ev.action {
                    Action::Depart => {
                        if !live.remove(&id) {
                            return Err(ScenarioError::DepartUnknown(id));
                        }
                        events.push(ScenarioEvent::Depart { time, vm: id });
                    }
                    Action::Arrive => {
                        if !live.insert(id.clone()) {
                            return Err(ScenarioError::DuplicateArrival(id));
                        }
                        let (vcpus, memory) = match ev.vm_type.as_deref() {
                            Some("custom") => match (ev.vcpus, ev.memory_gb) {
                                (Some(v), Some(m)) => (v, m * GIB),
                                _ => return Err(ScenarioError::IncompleteCustomType(id)),
                            },
                            Some(name) => {
                                let p = preset(name)?;
                                (p.vcpus, p.memory)
                            }
                            None => return Err(ScenarioError::InvalidVm(format!(
                                "{id}: arrival needs a type"
                            ))),
                        };
                        let spec = VmSpec {
                            id,
                            vcpus,
                            memory,
                            class: ev.class.ok_or_else(|| {
                                ScenarioError::InvalidVm(format!("{}: arrival needs a class", ev.id))
                            })?,
                            sensitive: ev.sensitive.unwrap_or(false),
                            expected_perf: ev.expected_perf.unwrap_or(1.0),
                            affinity_servers: ev
                                .affinity_servers
                                .map(|s| s.into_iter().map(ServerId).collect()),
                        };
                        spec.validate()?;
                        events.push(ScenarioEvent::Arrive { time, vm: spec });
                    }
                }
            }
            Ok(events)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAPER_MIX: &str =
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/paper-mix.scenario"));

    #[test]
    fn presets_match_the_sizing_table() {
        assert_eq!(preset("small").unwrap().vcpus, 4);
        assert_eq!(preset("small").unwrap().memory, 16 * GIB);
        assert_eq!(preset("medium").unwrap().vcpus, 8);
        assert_eq!(preset("large").unwrap().memory, 64 * GIB);
        assert_eq!(preset("huge").unwrap().vcpus, 72);
        assert_eq!(preset("huge").unwrap().memory, 288 * GIB);
        assert!(matches!(preset("tiny"), Err(ScenarioError::UnknownPreset(_))));
    }

    #[test]
    fn paper_mix_has_twenty_arrivals_at_time_zero() {
        let events = parse_scenario(PAPER_MIX).unwrap();
        assert_eq!(events.len(), 20);
        assert!(events.iter().all(|e| e.time() == 0));
        let mut small = 0;
        let mut medium = 0;
        let mut large = 0;
        let mut huge = 0;
        let mut total_vcpus = 0;
        for ev in &events {
            let ScenarioEvent::Arrive { vm, .. } = ev else {
                panic!("expected only arrivals");
            };
            total_vcpus += vm.vcpus;
            match vm.vcpus {
                4 => small += 1,
                8 => medium += 1,
                16 => large += 1,
                72 => huge += 1,
                other => panic!("unexpected size {other}"),
            }
        }
        assert_eq!((small, medium, large, huge), (12, 4, 2, 2));
        // 12*4 + 4*8 + 2*16 + 2*72 = 256 <= 288: fits the reference
        // topology without overbooking.
        assert_eq!(total_vcpus, 256);
    }

    #[test]
    fn empty_document_is_empty_scenario() {
        assert!(parse_scenario("").unwrap().is_empty());
    }

    #[test]
    fn depart_before_arrive_is_rejected() {
        let doc = r#"
            [[events]]
            time = 0
            action = "depart"
            id = "ghost"
        "#;
        assert!(matches!(
            parse_scenario(doc).unwrap_err(),
            ScenarioError::DepartUnknown(_)
        ));
    }

    #[test]
    fn decreasing_times_are_rejected() {
        let doc = r#"
            [[events]]
            time = 5
            action = "arrive"
            id = "a"
            type = "small"
            class = "sheep"

            [[events]]
            time = 4
            action = "arrive"
            id = "b"
            type = "small"
            class = "sheep"
        "#;
        assert!(matches!(
            parse_scenario(doc).unwrap_err(),
            ScenarioError::TimeOrder { previous: 5, found: 4 }
        ));
    }

    #[test]
    fn negative_time_is_rejected() {
        let doc = r#"
            [[events]]
            time = -1
            action = "arrive"
            id = "a"
            type = "small"
            class = "sheep"
        "#;
        assert!(matches!(
            parse_scenario(doc).unwrap_err(),
            ScenarioError::NegativeTime(-1)
        ));
    }

    #[test]
    fn custom_type_requires_size_fields() {
        let doc = r#"
            [[events]]
            time = 0
            action = "arrive"
            id = "c"
            type = "custom"
            vcpus = 2
            class = "devil"
        "#;
        assert!(matches!(
            parse_scenario(doc).unwrap_err(),
            ScenarioError::IncompleteCustomType(_)
        ));
    }

    #[test]
    fn scenario_round_trips_through_render() {
        let events = parse_scenario(PAPER_MIX).unwrap();
        let rendered = render_scenario(&events);
        let reparsed = parse_scenario(&rendered).unwrap();
        assert_eq!(events, reparsed);
    }
}
