// SPDX-License-Identifier: Apache-2.0

//! Scenario documents, timing feasibility and the static control plane.
//!
//! A scenario describes exactly two nodes and one heralding station. Node
//! `k` is attached to the station through arm `k`: its paired quantum and
//! classical ports share one fiber, so a photon and the GEN sent with it
//! reach the station at the same instant.
//!
//! All times are in ns, lengths in m and probabilities are decimals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::DeviceId;
use crate::mhp::{
    bin_of, build_midpoint_program, build_node_program, gen_call, set_pair_call, set_peer_call,
    BinIndex, NodePorts, PortPair, DET_TBL, GEN_TBL, MIDPOINT_DETECTORS, MIDPOINT_PORTS, MP_TBL,
};
use crate::phys::{
    Arm, DetectorParams, DetectorSetup, FiberParams, LossMode, NodeId, DEFAULT_LATENCY_NS_PER_M,
};
use crate::pipeline::{
    ActionCall, Device, GroupError, ProgramError, TableError, DEFAULT_PROCESSING_DELAY_NS,
};

pub const NODE_COUNT: usize = 2;
pub const MIDPOINT: DeviceId = DeviceId(NODE_COUNT as u16);

/// Device id of node `k`.
pub fn node_device(k: NodeId) -> DeviceId {
    DeviceId(k)
}

fn default_processing() -> u64 {
    DEFAULT_PROCESSING_DELAY_NS
}

fn default_latency() -> u64 {
    DEFAULT_LATENCY_NS_PER_M
}

fn default_slots() -> u16 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub clock: ClockSpec,
    pub run: RunSpec,
    pub nodes: Vec<NodeSpec>,
    pub midpoint: MidpointSpec,
    /// Runtime table mutations, applied at the start of a cycle.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<FaultSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockSpec {
    pub period_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cycles: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_after_successes: Option<u64>,
    /// Runtime traps tolerated before a run counts as failed.
    #[serde(default)]
    pub trap_budget: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    #[serde(default = "default_slots")]
    pub slots: u16,
    /// Offset of this node's timer within each period.
    pub phase_ns: u64,
    #[serde(default = "default_processing")]
    pub processing_ns: u64,
    pub ports: Vec<PortPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_default: Option<GenSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gen_entries: Vec<GenEntry>,
}

/// Parameters of a `gen` action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub qport: u16,
    pub cport: u16,
    #[serde(default)]
    pub slot: u16,
    #[serde(default)]
    pub params: u16,
}

/// A `gen_tbl` entry for one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenEntry {
    pub cycle: u32,
    pub qport: u16,
    pub cport: u16,
    #[serde(default)]
    pub slot: u16,
    #[serde(default)]
    pub params: u16,
}

impl GenEntry {
    pub fn gen(&self) -> GenSpec {
        GenSpec {
            qport: self.qport,
            cport: self.cport,
            slot: self.slot,
            params: self.params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MidpointSpec {
    #[serde(default = "default_processing")]
    pub processing_ns: u64,
    /// Defaults to the clock period.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_width_ns: Option<u64>,
    pub detector: DetectorSpec,
    pub arms: Vec<ArmSpec>,
    /// When absent the canonical wiring is derived from the arms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mp_tbl: Option<Vec<MpEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub det_tbl: Option<Vec<DetEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<GroupSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    #[serde(default)]
    pub det_id: u16,
    pub p_bsm: f64,
    #[serde(default)]
    pub report_latency_ns: u64,
}

/// Fiber between node `node` and station port `port`, carrying the node's
/// `qport`/`cport` pair. Exactly one of `p_arrive` and
/// `attenuation_db_per_km` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub node: NodeId,
    pub port: u16,
    pub qport: u16,
    pub cport: u16,
    pub length_m: u64,
    #[serde(default = "default_latency")]
    pub latency_ns_per_m: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_arrive: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attenuation_db_per_km: Option<f64>,
}

/// `mp_tbl`: GEN on `port` pairs with `peer`, replies go to `group`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpEntry {
    pub port: u16,
    pub peer: u16,
    pub group: u16,
    pub det: u16,
}

/// `det_tbl`: reports of detector `det` pair `port_a` with `port_b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetEntry {
    pub det: u16,
    pub port_a: u16,
    pub port_b: u16,
    pub group: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub id: u16,
    pub ports: Vec<u16>,
}

/// Replace a node's `gen_tbl` default action from cycle `at_cycle` on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub at_cycle: u32,
    pub node: NodeId,
    pub gen_default: GenSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Syntax,
    Unreadable,
    InvalidValue,
    ProbabilityOutOfRange,
    UnknownPort,
    UnknownReference,
    DuplicateTableKey,
    MissingEntry,
    MissingReverseEntry,
    UnpairedAttempt,
    MisalignedArrivals,
    PeriodTooShort,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Syntax => "syntax",
            Rule::Unreadable => "unreadable",
            Rule::InvalidValue => "invalid value",
            Rule::ProbabilityOutOfRange => "probability out of range",
            Rule::UnknownPort => "unknown port",
            Rule::UnknownReference => "unknown reference",
            Rule::DuplicateTableKey => "duplicate table key",
            Rule::MissingEntry => "missing entry",
            Rule::MissingReverseEntry => "missing reverse entry",
            Rule::UnpairedAttempt => "unpaired attempt",
            Rule::MisalignedArrivals => "misaligned arrivals",
            Rule::PeriodTooShort => "period too short",
        })
    }
}

/// A rejected scenario: the offending field and the rule it breaks.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {rule}: {detail}")]
pub struct ConfigError {
    pub field: String,
    pub rule: Rule,
    pub detail: String,
}

fn err<T>(
    field: impl Into<String>,
    rule: Rule,
    detail: impl Into<String>,
) -> Result<T, ConfigError> {
    Err(ConfigError {
        field: field.into(),
        rule,
        detail: detail.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocFormat {
    Toml,
    Json,
}

impl DocFormat {
    /// `.json` files are JSON, anything else TOML.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => DocFormat::Json,
            _ => DocFormat::Toml,
        }
    }
}

/// Parse and fully validate a scenario document.
pub fn load_scenario(text: &str, format: DocFormat) -> Result<Scenario, ConfigError> {
    let scenario: Scenario = match format {
        DocFormat::Toml => {
            toml::from_str(text).or_else(|e| err("document", Rule::Syntax, e.to_string()))?
        }
        DocFormat::Json => {
            serde_json::from_str(text).or_else(|e| err("document", Rule::Syntax, e.to_string()))?
        }
    };
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario_path(path: &Path) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path)
        .or_else(|e| err(path.display().to_string(), Rule::Unreadable, e.to_string()))?;
    load_scenario(&text, DocFormat::from_path(path))
}

impl Scenario {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Arm of node `k`. Requires a structurally valid scenario.
    pub fn arm(&self, k: NodeId) -> &ArmSpec {
        self.midpoint
            .arms
            .iter()
            .find(|a| a.node == k)
            .expect("validated scenario has one arm per node")
    }

    pub fn bin_width_ns(&self) -> u64 {
        self.midpoint.bin_width_ns.unwrap_or(self.clock.period_ns)
    }

    pub fn fiber(&self, k: NodeId) -> FiberParams {
        let arm = self.arm(k);
        FiberParams {
            length_m: arm.length_m,
            latency_ns_per_m: arm.latency_ns_per_m,
            loss: match (arm.p_arrive, arm.attenuation_db_per_km) {
                (_, Some(db_per_km)) => LossMode::Attenuation { db_per_km },
                (p, None) => LossMode::Direct {
                    p_arrive: p.unwrap_or(1.0),
                },
            },
        }
    }

    pub fn detector_params(&self) -> DetectorParams {
        DetectorParams {
            p_bsm: self.midpoint.detector.p_bsm,
            bin_width_ns: self.bin_width_ns(),
            report_latency_ns: self.midpoint.detector.report_latency_ns,
        }
    }

    pub fn detector_setup(&self) -> DetectorSetup {
        let arm = |k: NodeId| {
            let spec = self.arm(k);
            Arm {
                node: k,
                qport: spec.qport,
                fiber: self.fiber(k),
            }
        };
        DetectorSetup {
            det_id: self.midpoint.detector.det_id,
            params: self.detector_params(),
            arms: [arm(0), arm(1)],
        }
    }

    /// The node's `gen_tbl` default; the arm's ports with slot 0 when the
    /// node configures neither a default nor entries.
    pub fn gen_default(&self, k: NodeId) -> Option<GenSpec> {
        let node = &self.nodes[k as usize];
        if node.gen_default.is_some() || !node.gen_entries.is_empty() {
            return node.gen_default;
        }
        let arm = self.arm(k);
        Some(GenSpec {
            qport: arm.qport,
            cport: arm.cport,
            slot: 0,
            params: 0,
        })
    }

    pub fn mp_entries(&self) -> Vec<MpEntry> {
        if let Some(entries) = &self.midpoint.mp_tbl {
            return entries.clone();
        }
        let (a, b) = (self.arm(0).port, self.arm(1).port);
        let det = self.midpoint.detector.det_id;
        vec![
            MpEntry {
                port: a,
                peer: b,
                group: 1,
                det,
            },
            MpEntry {
                port: b,
                peer: a,
                group: 1,
                det,
            },
        ]
    }

    pub fn det_entries(&self) -> Vec<DetEntry> {
        if let Some(entries) = &self.midpoint.det_tbl {
            return entries.clone();
        }
        vec![DetEntry {
            det: self.midpoint.detector.det_id,
            port_a: self.arm(0).port,
            port_b: self.arm(1).port,
            group: 1,
        }]
    }

    pub fn groups(&self) -> Vec<GroupSpec> {
        if let Some(groups) = &self.midpoint.groups {
            return groups.clone();
        }
        vec![GroupSpec {
            id: 1,
            ports: vec![self.arm(0).port, self.arm(1).port],
        }]
    }

    pub fn node_ports(&self, k: NodeId) -> NodePorts {
        NodePorts {
            pairs: self.nodes[k as usize].ports.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_structure()?;
        self.validate_tables()?;
        self.validate_timing()
    }

    fn validate_structure(&self) -> Result<(), ConfigError> {
        if self.nodes.len() != NODE_COUNT {
            return err(
                "nodes",
                Rule::InvalidValue,
                format!("expected {NODE_COUNT} nodes, found {}", self.nodes.len()),
            );
        }
        if self.clock.period_ns == 0 {
            return err("clock.period_ns", Rule::InvalidValue, "must be positive");
        }
        let w = self.bin_width_ns();
        if w == 0 || self.clock.period_ns % w != 0 {
            return err(
                "midpoint.bin_width_ns",
                Rule::InvalidValue,
                format!(
                    "{w} must be positive and divide the period {}",
                    self.clock.period_ns
                ),
            );
        }
        if self.run.max_cycles.is_none() && self.run.stop_after_successes.is_none() {
            return err(
                "run",
                Rule::InvalidValue,
                "set max_cycles or stop_after_successes",
            );
        }
        let p_bsm = self.midpoint.detector.p_bsm;
        if !(0.0..=1.0).contains(&p_bsm) {
            return err(
                "midpoint.detector.p_bsm",
                Rule::ProbabilityOutOfRange,
                format!("{p_bsm} not in [0, 1]"),
            );
        }
        if self.midpoint.detector.det_id as u32 >= MIDPOINT_DETECTORS {
            return err(
                "midpoint.detector.det_id",
                Rule::InvalidValue,
                format!("must be below {MIDPOINT_DETECTORS}"),
            );
        }

        for (k, node) in self.nodes.iter().enumerate() {
            let at = |f: &str| format!("nodes[{k}].{f}");
            if node.slots == 0 {
                return err(
                    at("slots"),
                    Rule::InvalidValue,
                    "a node needs at least one slot",
                );
            }
            let mut q = BTreeSet::new();
            let mut c = BTreeSet::new();
            for p in &node.ports {
                if p.qport == 0 || p.cport == 0 {
                    return err(at("ports"), Rule::InvalidValue, "port 0 is the CPU port");
                }
                if !q.insert(p.qport) || !c.insert(p.cport) {
                    return err(
                        at("ports"),
                        Rule::InvalidValue,
                        "each port may be paired once",
                    );
                }
            }
        }

        let arms = &self.midpoint.arms;
        if arms.len() != NODE_COUNT {
            return err(
                "midpoint.arms",
                Rule::InvalidValue,
                format!("expected {NODE_COUNT} arms"),
            );
        }
        for (i, arm) in arms.iter().enumerate() {
            let at = |f: &str| format!("midpoint.arms[{i}].{f}");
            if arm.node as usize >= NODE_COUNT {
                return err(
                    at("node"),
                    Rule::UnknownReference,
                    format!("no node {}", arm.node),
                );
            }
            if arms.iter().filter(|a| a.node == arm.node).count() != 1 {
                return err(at("node"), Rule::InvalidValue, "one arm per node");
            }
            if arm.port == 0 || arm.port as u32 >= MIDPOINT_PORTS {
                return err(
                    at("port"),
                    Rule::UnknownPort,
                    format!("station ports are 1..{MIDPOINT_PORTS}"),
                );
            }
            if arms.iter().filter(|a| a.port == arm.port).count() != 1 {
                return err(
                    at("port"),
                    Rule::InvalidValue,
                    "arms need distinct station ports",
                );
            }
            let pair = PortPair {
                qport: arm.qport,
                cport: arm.cport,
            };
            if !self.nodes[arm.node as usize].ports.contains(&pair) {
                return err(
                    at("qport"),
                    Rule::UnknownPort,
                    format!("node {} has no pair {}/{}", arm.node, arm.qport, arm.cport),
                );
            }
            match (arm.p_arrive, arm.attenuation_db_per_km) {
                (Some(p), None) if !(0.0..=1.0).contains(&p) => {
                    return err(
                        at("p_arrive"),
                        Rule::ProbabilityOutOfRange,
                        format!("{p} not in [0, 1]"),
                    );
                }
                (None, Some(db)) if !(db >= 0.0 && db.is_finite()) => {
                    return err(
                        at("attenuation_db_per_km"),
                        Rule::InvalidValue,
                        format!("{db} must be non-negative"),
                    );
                }
                (Some(_), None) | (None, Some(_)) => {}
                _ => {
                    return err(
                        at("p_arrive"),
                        Rule::InvalidValue,
                        "set exactly one of p_arrive and attenuation_db_per_km",
                    );
                }
            }
        }
        Ok(())
    }

    fn check_gen(&self, field: String, k: NodeId, g: &GenSpec) -> Result<(), ConfigError> {
        let arm = self.arm(k);
        if g.qport != arm.qport || g.cport != arm.cport {
            return err(
                field,
                Rule::UnknownPort,
                format!(
                    "ports {}/{} are not attached to the station",
                    g.qport, g.cport
                ),
            );
        }
        if g.slot >= self.nodes[k as usize].slots {
            return err(field, Rule::UnknownReference, format!("no slot {}", g.slot));
        }
        Ok(())
    }

    fn validate_tables(&self) -> Result<(), ConfigError> {
        for (k, node) in self.nodes.iter().enumerate() {
            let k = k as NodeId;
            if let Some(g) = &node.gen_default {
                self.check_gen(format!("nodes[{k}].gen_default"), k, g)?;
            }
            let mut cycles = BTreeSet::new();
            for (i, e) in node.gen_entries.iter().enumerate() {
                let field = format!("nodes[{k}].gen_entries[{i}]");
                self.check_gen(field.clone(), k, &e.gen())?;
                if !cycles.insert(e.cycle) {
                    return err(
                        field,
                        Rule::DuplicateTableKey,
                        format!("cycle {} twice", e.cycle),
                    );
                }
            }
        }
        // Both nodes must attempt in the same cycles.
        match (self.gen_default(0), self.gen_default(1)) {
            (Some(_), Some(_)) => {}
            (None, None) => {
                let cycles = |k: usize| -> BTreeSet<u32> {
                    self.nodes[k].gen_entries.iter().map(|e| e.cycle).collect()
                };
                if cycles(0) != cycles(1) {
                    return err(
                        "nodes[1].gen_entries",
                        Rule::UnpairedAttempt,
                        "nodes attempt in different cycles",
                    );
                }
            }
            _ => {
                return err(
                    "nodes[1].gen_default",
                    Rule::UnpairedAttempt,
                    "only one node has a default action",
                )
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            let field = format!("faults[{i}]");
            if f.node as usize >= NODE_COUNT {
                return err(field, Rule::UnknownReference, format!("no node {}", f.node));
            }
            if self.gen_default(0).is_none() {
                return err(
                    field,
                    Rule::UnpairedAttempt,
                    "faults replace default actions, none configured",
                );
            }
            self.check_gen(format!("{field}.gen_default"), f.node, &f.gen_default)?;
        }

        let arm_ports: BTreeSet<u16> = self.midpoint.arms.iter().map(|a| a.port).collect();
        let det_id = self.midpoint.detector.det_id;

        let groups = self.groups();
        let mut group_ids = BTreeSet::new();
        for (i, g) in groups.iter().enumerate() {
            let field = format!("midpoint.groups[{i}]");
            if g.id == 0 {
                return err(field, Rule::InvalidValue, "group 0 is reserved");
            }
            if !group_ids.insert(g.id) {
                return err(
                    field,
                    Rule::DuplicateTableKey,
                    format!("group {} twice", g.id),
                );
            }
            if g.ports.is_empty() {
                return err(field, Rule::InvalidValue, "a group needs ports");
            }
            if let Some(p) = g.ports.iter().find(|p| !arm_ports.contains(p)) {
                return err(
                    field,
                    Rule::UnknownPort,
                    format!("port {p} is not attached"),
                );
            }
        }

        let mp = self.mp_entries();
        let mut keys = BTreeMap::new();
        for (i, e) in mp.iter().enumerate() {
            let field = format!("midpoint.mp_tbl[{i}]");
            for p in [e.port, e.peer] {
                if !arm_ports.contains(&p) {
                    return err(
                        field,
                        Rule::UnknownPort,
                        format!("port {p} is not attached"),
                    );
                }
            }
            if e.det != det_id {
                return err(
                    field,
                    Rule::UnknownReference,
                    format!("no detector {}", e.det),
                );
            }
            if !group_ids.contains(&e.group) {
                return err(
                    field,
                    Rule::UnknownReference,
                    format!("no group {}", e.group),
                );
            }
            if keys.insert(e.port, *e).is_some() {
                return err(
                    field,
                    Rule::DuplicateTableKey,
                    format!("port {} twice", e.port),
                );
            }
        }
        for (i, e) in mp.iter().enumerate() {
            let reverse = MpEntry {
                port: e.peer,
                peer: e.port,
                ..*e
            };
            if keys.get(&e.peer) != Some(&reverse) {
                return err(
                    format!("midpoint.mp_tbl[{i}]"),
                    Rule::MissingReverseEntry,
                    format!(
                        "no entry {} -> {} matching {} -> {}",
                        e.peer, e.port, e.port, e.peer
                    ),
                );
            }
        }
        if let Some(p) = arm_ports.iter().find(|p| !keys.contains_key(p)) {
            return err(
                "midpoint.mp_tbl",
                Rule::MissingEntry,
                format!("no entry for port {p}"),
            );
        }

        let det = self.det_entries();
        let mut dets = BTreeSet::new();
        for (i, e) in det.iter().enumerate() {
            let field = format!("midpoint.det_tbl[{i}]");
            if e.det != det_id {
                return err(
                    field,
                    Rule::UnknownReference,
                    format!("no detector {}", e.det),
                );
            }
            if !dets.insert(e.det) {
                return err(
                    field,
                    Rule::DuplicateTableKey,
                    format!("detector {} twice", e.det),
                );
            }
            for p in [e.port_a, e.port_b] {
                if !arm_ports.contains(&p) {
                    return err(
                        field,
                        Rule::UnknownPort,
                        format!("port {p} is not attached"),
                    );
                }
            }
            if !group_ids.contains(&e.group) {
                return err(
                    field,
                    Rule::UnknownReference,
                    format!("no group {}", e.group),
                );
            }
        }
        if !dets.contains(&det_id) {
            return err(
                "midpoint.det_tbl",
                Rule::MissingEntry,
                format!("no entry for detector {det_id}"),
            );
        }
        Ok(())
    }

    fn validate_timing(&self) -> Result<(), ConfigError> {
        let plan = derive_timing(self);
        let (a0, a1) = (plan.arrival(0, 0), plan.arrival(1, 0));
        if a0 != a1 {
            return err(
                "nodes[].phase_ns",
                Rule::MisalignedArrivals,
                format!("cycle 0 photons reach the station at {a0} ns and {a1} ns"),
            );
        }
        let reply = plan.reply(0, 0).max(plan.reply(1, 0));
        if reply >= plan.master_tick(1) {
            return err(
                "clock.period_ns",
                Rule::PeriodTooShort,
                format!(
                    "the last reply of a cycle lands at {reply} ns, not before the next cycle starts at {} ns",
                    plan.master_tick(1)
                ),
            );
        }
        if plan.report(0) >= plan.arrival(0, 1) {
            return err(
                "clock.period_ns",
                Rule::PeriodTooShort,
                format!(
                    "detector report at {} ns overlaps the next cycle's arrivals at {} ns",
                    plan.report(0),
                    plan.arrival(0, 1)
                ),
            );
        }
        if let Some(n) = self.run.max_cycles {
            let last = (n as u64)
                .checked_mul(self.clock.period_ns)
                .and_then(|t| t.checked_add(reply));
            if last.is_none() {
                return err(
                    "run.max_cycles",
                    Rule::InvalidValue,
                    "run exceeds the 64-bit time range",
                );
            }
        }
        Ok(())
    }
}

/// Fixed per-node delays that shape every cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTiming {
    pub phase_ns: u64,
    pub processing_ns: u64,
    pub fiber_delay_ns: u64,
}

/// Closed-form schedule of every cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingPlan {
    pub period_ns: u64,
    pub bin_width_ns: u64,
    pub report_latency_ns: u64,
    pub midpoint_processing_ns: u64,
    pub nodes: [NodeTiming; NODE_COUNT],
}

impl TimingPlan {
    fn base(&self, cycle: u32) -> u64 {
        cycle as u64 * self.period_ns
    }

    /// Start of a cycle: the earliest node timer.
    pub fn master_tick(&self, cycle: u32) -> u64 {
        self.base(cycle) + self.nodes.iter().map(|n| n.phase_ns).min().unwrap_or(0)
    }

    /// TIMER injection at node `k`.
    pub fn timer(&self, k: NodeId, cycle: u32) -> u64 {
        self.base(cycle) + self.nodes[k as usize].phase_ns
    }

    /// Photon emission and GEN departure at node `k`.
    pub fn emission(&self, k: NodeId, cycle: u32) -> u64 {
        self.timer(k, cycle) + self.nodes[k as usize].processing_ns
    }

    /// Photon and GEN arrival at the station.
    pub fn arrival(&self, k: NodeId, cycle: u32) -> u64 {
        self.emission(k, cycle) + self.nodes[k as usize].fiber_delay_ns
    }

    pub fn bin(&self, cycle: u32) -> BinIndex {
        bin_of(self.arrival(0, cycle), self.bin_width_ns)
    }

    /// DETECTOR injection at the station for the cycle's bin.
    pub fn report(&self, cycle: u32) -> u64 {
        (self.bin(cycle).0 + 1) * self.bin_width_ns + self.report_latency_ns
    }

    /// MP_REPLY delivery to node `k`'s host side.
    pub fn reply(&self, k: NodeId, cycle: u32) -> u64 {
        let n = &self.nodes[k as usize];
        self.report(cycle) + self.midpoint_processing_ns + n.fiber_delay_ns + n.processing_ns
    }
}

/// Closed-form timing of a structurally valid scenario. Feasibility is not
/// checked here.
pub fn derive_timing(s: &Scenario) -> TimingPlan {
    let node = |k: usize| NodeTiming {
        phase_ns: s.nodes[k].phase_ns,
        processing_ns: s.nodes[k].processing_ns,
        fiber_delay_ns: s.fiber(k as NodeId).delay_ns(),
    };
    TimingPlan {
        period_ns: s.clock.period_ns,
        bin_width_ns: s.bin_width_ns(),
        report_latency_ns: s.midpoint.detector.report_latency_ns,
        midpoint_processing_ns: s.midpoint.processing_ns,
        nodes: [node(0), node(1)],
    }
}

/// The three devices of a link with programs loaded.
pub struct Testbed {
    pub nodes: [Device; NODE_COUNT],
    pub midpoint: Device,
}

impl Testbed {
    pub fn load(s: &Scenario) -> Result<Self, ProgramError> {
        let node = |k: NodeId| -> Result<Device, ProgramError> {
            let mut d = Device::new(node_device(k));
            d.load_program(&build_node_program(&s.node_ports(k)))?;
            d.set_processing_delay_ns(s.nodes[k as usize].processing_ns);
            Ok(d)
        };
        let mut midpoint = Device::new(MIDPOINT);
        midpoint.load_program(&build_midpoint_program(s.bin_width_ns()))?;
        midpoint.set_processing_delay_ns(s.midpoint.processing_ns);
        Ok(Testbed {
            nodes: [node(0)?, node(1)?],
            midpoint,
        })
    }

    pub fn device(&self, id: DeviceId) -> Option<&Device> {
        match id {
            MIDPOINT => Some(&self.midpoint),
            DeviceId(k) => self.nodes.get(k as usize),
        }
    }

    pub fn device_mut(&mut self, id: DeviceId) -> Option<&mut Device> {
        match id {
            MIDPOINT => Some(&mut self.midpoint),
            DeviceId(k) => self.nodes.get_mut(k as usize),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Group(#[from] GroupError),
}

fn gen_action(g: &GenSpec) -> ActionCall {
    gen_call(g.qport, g.cport, g.slot, g.params)
}

/// Install every table entry, default action and multicast group of a
/// validated scenario.
pub fn apply_control(s: &Scenario, testbed: &mut Testbed) -> Result<(), ControlError> {
    for (k, device) in testbed.nodes.iter_mut().enumerate() {
        if let Some(g) = s.gen_default(k as NodeId) {
            device.set_default_action(GEN_TBL, &gen_action(&g))?;
        }
        for e in &s.nodes[k].gen_entries {
            device.install_entry(GEN_TBL, &[e.cycle as u64], &gen_action(&e.gen()))?;
        }
    }
    let mid = &mut testbed.midpoint;
    for e in s.mp_entries() {
        mid.install_entry(
            MP_TBL,
            &[e.port as u64],
            &set_peer_call(e.peer, e.group, e.det),
        )?;
    }
    for e in s.det_entries() {
        mid.install_entry(
            DET_TBL,
            &[e.det as u64],
            &set_pair_call(e.port_a, e.port_b, e.group),
        )?;
    }
    for g in s.groups() {
        mid.create_mcast_group(g.id, &g.ports)?;
    }
    Ok(())
}

/// Runtime change to a device's tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TableMutation {
    SetDefault {
        table: String,
        call: ActionCall,
    },
    Install {
        table: String,
        key: Vec<u64>,
        call: ActionCall,
    },
    Modify {
        table: String,
        key: Vec<u64>,
        call: ActionCall,
    },
    Delete {
        table: String,
        key: Vec<u64>,
    },
}

impl TableMutation {
    pub fn gen_default(g: &GenSpec) -> Self {
        TableMutation::SetDefault {
            table: GEN_TBL.to_string(),
            call: gen_action(g),
        }
    }

    pub fn apply(&self, device: &mut Device) -> Result<(), TableError> {
        match self {
            TableMutation::SetDefault { table, call } => device.set_default_action(table, call),
            TableMutation::Install { table, key, call } => device.install_entry(table, key, call),
            TableMutation::Modify { table, key, call } => device.modify_entry(table, key, call),
            TableMutation::Delete { table, key } => device.delete_entry(table, key),
        }
    }
}
