// SPDX-License-Identifier: Apache-2.0

//! Stochastic model of the quantum link: photon emission and fiber loss,
//! the time-binned midpoint detector, node qubit memories and the
//! ground-truth registry of heralded pairs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::mhp::{bin_of, BinIndex, MpReply, ReplyOutcome, WireMessage};

pub type NodeId = u16;

/// Default propagation latency, roughly light in silica fiber.
pub const DEFAULT_LATENCY_NS_PER_M: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Probability that a photon reaches the detector.
    Direct { p_arrive: f64 },
    /// Exponential loss in dB per km.
    Attenuation { db_per_km: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberParams {
    pub length_m: u64,
    pub latency_ns_per_m: u64,
    pub loss: LossMode,
}

impl FiberParams {
    pub fn lossless(length_m: u64) -> Self {
        FiberParams {
            length_m,
            latency_ns_per_m: DEFAULT_LATENCY_NS_PER_M,
            loss: LossMode::Direct { p_arrive: 1.0 },
        }
    }

    pub fn with_p_arrive(length_m: u64, p_arrive: f64) -> Self {
        FiberParams {
            loss: LossMode::Direct { p_arrive },
            ..FiberParams::lossless(length_m)
        }
    }

    /// One-way propagation delay.
    pub fn delay_ns(&self) -> u64 {
        self.length_m * self.latency_ns_per_m
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.loss {
            LossMode::Direct { p_arrive } if !(0.0..=1.0).contains(&p_arrive) => {
                Err(format!("p_arrive {p_arrive} outside [0, 1]"))
            }
            LossMode::Attenuation { db_per_km } if !(db_per_km >= 0.0 && db_per_km.is_finite()) => {
                Err(format!(
                    "attenuation {db_per_km} dB/km must be non-negative"
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Probability that a photon survives the fiber.
pub fn arrival_probability(fiber: &FiberParams) -> f64 {
    match fiber.loss {
        LossMode::Direct { p_arrive } => p_arrive,
        LossMode::Attenuation { db_per_km } => {
            let length_km = fiber.length_m as f64 / 1000.0;
            10f64.powf(-db_per_km * length_km / 10.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Success probability when exactly one photon from each side lands in
    /// the bin.
    pub p_bsm: f64,
    pub bin_width_ns: u64,
    pub report_latency_ns: u64,
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.p_bsm) {
            return Err(format!("p_bsm {} outside [0, 1]", self.p_bsm));
        }
        if self.bin_width_ns == 0 {
            return Err("bin_width_ns must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    Free,
    Attempting(u32),
    Entangled(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QubitSlot {
    pub slot_id: u16,
    pub state: SlotState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordStatus {
    Provisional,
    Accepted,
    Discarded,
}

/// Ground truth for one herald. `pair_seq` is 0 until both nodes have
/// processed the matching SUCCESS reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntanglementRecord {
    pub det_id: u16,
    pub pair_seq: u32,
    pub slot_a: (NodeId, u16),
    pub slot_b: (NodeId, u16),
    pub created_at: SimTime,
    pub status: RecordStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotonFlight {
    pub source: NodeId,
    pub det_id: u16,
    pub cycle: u32,
    pub slot_id: u16,
    pub params: u16,
    pub emit_time: SimTime,
    pub arrive_time: SimTime,
    pub lost: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorReport {
    pub det_id: u16,
    pub bin: BinIndex,
    /// 1 = success, 0 = failure.
    pub outcome: u8,
}

impl DetectorReport {
    /// The DETECTOR frame injected into the midpoint pipeline.
    pub fn encode(&self) -> Vec<u8> {
        WireMessage::Detector {
            outcome: self.outcome,
            det_id: self.det_id,
            bin: self.bin.0 as u32,
        }
        .encode()
    }
}

/// How a node's memory changed in response to a reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotUpdate {
    pub slot_id: u16,
    pub state: SlotState,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PhysError {
    #[error("node {node} slot {slot} busy ({state:?})")]
    SlotBusy {
        node: NodeId,
        slot: u16,
        state: SlotState,
    },
    #[error("node {node} has no slot {slot}")]
    UnknownSlot { node: NodeId, slot: u16 },
    #[error("node {node} has no quantum port {qport}")]
    UnknownPort { node: NodeId, qport: u16 },
    #[error("node {node} has no slot attempting cycle {cycle}")]
    UnknownCycle { node: NodeId, cycle: u32 },
    #[error("unknown detector {0}")]
    UnknownDetector(u16),
    #[error("node {node} slot {slot}: illegal transition from {from:?}")]
    IllegalTransition {
        node: NodeId,
        slot: u16,
        from: SlotState,
    },
}

/// One side of a detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arm {
    pub node: NodeId,
    pub qport: u16,
    pub fiber: FiberParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSetup {
    pub det_id: u16,
    pub params: DetectorParams,
    pub arms: [Arm; 2],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorStats {
    pub bins_closed: u64,
    pub heralds_success: u64,
    pub heralds_fail: u64,
    pub stray_photons: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodePhysStats {
    pub photons_emitted: u64,
    pub photons_lost: u64,
}

#[derive(Debug, Clone, Copy)]
struct Arrival {
    side: usize,
    at: SimTime,
    source: NodeId,
    cycle: u32,
    slot: u16,
}

struct Side {
    node: NodeId,
    slot: u16,
    cycle: u32,
    confirmed: Option<u32>,
}

struct Pending {
    det_id: u16,
    created_at: SimTime,
    sides: [Side; 2],
}

struct Detector {
    setup: DetectorSetup,
    arrivals: Vec<Arrival>,
    next_pair_seq: u32,
    stats: DetectorStats,
}

/// Running summary of a set of pair sequence numbers, so that agreement
/// can be checked without retaining per-pair history.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct PairTally {
    count: u64,
    sum: u64,
    xor: u64,
}

impl PairTally {
    fn add(&mut self, seq: u32) {
        self.count += 1;
        self.sum += seq as u64;
        // Spread bits so that distinct small sets rarely collide.
        self.xor ^= (seq as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
}

pub struct PhysModel {
    rng: ChaCha8Rng,
    memories: BTreeMap<NodeId, Vec<SlotState>>,
    node_stats: BTreeMap<NodeId, NodePhysStats>,
    detectors: Vec<Detector>,
    pending: Vec<Pending>,
    retain_history: bool,
    records: Vec<EntanglementRecord>,
    accepted: u64,
    discarded: u64,
    // Per node: pairs the node has held, and accepted records on its side.
    held: BTreeMap<NodeId, PairTally>,
    truth: BTreeMap<NodeId, PairTally>,
    held_seqs: BTreeMap<NodeId, Vec<u32>>,
    violations: Vec<String>,
    violation_count: u64,
}

const MAX_KEPT_VIOLATIONS: usize = 16;

impl PhysModel {
    /// `nodes` lists each node with its slot count.
    pub fn new(seed: u64, nodes: &[(NodeId, u16)], detectors: Vec<DetectorSetup>) -> Self {
        PhysModel {
            rng: ChaCha8Rng::seed_from_u64(seed),
            memories: nodes
                .iter()
                .map(|&(n, slots)| (n, vec![SlotState::Free; slots as usize]))
                .collect(),
            node_stats: nodes
                .iter()
                .map(|&(n, _)| (n, NodePhysStats::default()))
                .collect(),
            detectors: detectors
                .into_iter()
                .map(|setup| Detector {
                    setup,
                    arrivals: Vec::new(),
                    next_pair_seq: 1,
                    stats: DetectorStats::default(),
                })
                .collect(),
            pending: Vec::new(),
            retain_history: true,
            records: Vec::new(),
            accepted: 0,
            discarded: 0,
            held: BTreeMap::new(),
            truth: BTreeMap::new(),
            held_seqs: BTreeMap::new(),
            violations: Vec::new(),
            violation_count: 0,
        }
    }

    /// Keep finished records and per-node pair lists. On by default; long
    /// runs turn it off and rely on running tallies.
    pub fn set_retain_history(&mut self, retain: bool) {
        self.retain_history = retain;
    }

    fn violation(&mut self, msg: String) {
        self.violation_count += 1;
        if self.violations.len() < MAX_KEPT_VIOLATIONS {
            self.violations.push(msg);
        }
    }

    fn locate_arm(&self, node: NodeId, qport: u16) -> Option<(usize, usize)> {
        self.detectors.iter().enumerate().find_map(|(d, det)| {
            det.setup
                .arms
                .iter()
                .position(|a| a.node == node && a.qport == qport)
                .map(|side| (d, side))
        })
    }

    fn detector_index(&self, det_id: u16) -> Result<usize, PhysError> {
        self.detectors
            .iter()
            .position(|d| d.setup.det_id == det_id)
            .ok_or(PhysError::UnknownDetector(det_id))
    }

    pub fn slot(&self, node: NodeId, slot: u16) -> Option<QubitSlot> {
        let state = *self.memories.get(&node)?.get(slot as usize)?;
        Some(QubitSlot {
            slot_id: slot,
            state,
        })
    }

    pub fn slots(&self, node: NodeId) -> &[SlotState] {
        self.memories.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    fn slot_mut(&mut self, node: NodeId, slot: u16) -> Result<&mut SlotState, PhysError> {
        self.memories
            .get_mut(&node)
            .and_then(|m| m.get_mut(slot as usize))
            .ok_or(PhysError::UnknownSlot { node, slot })
    }

    /// Emit a photon from `node` on `qport` at time `t`. The slot moves to
    /// `Attempting(cycle)` and a Bernoulli draw decides whether the photon
    /// is lost. The caller schedules the arrival of a surviving photon.
    pub fn emit_photon(
        &mut self,
        node: NodeId,
        qport: u16,
        slot: u16,
        cycle: u32,
        params: u16,
        t: SimTime,
    ) -> Result<PhotonFlight, PhysError> {
        let (d, side) = self
            .locate_arm(node, qport)
            .ok_or(PhysError::UnknownPort { node, qport })?;
        let state = self.slot_mut(node, slot)?;
        if *state != SlotState::Free {
            return Err(PhysError::SlotBusy {
                node,
                slot,
                state: *state,
            });
        }
        *state = SlotState::Attempting(cycle);

        let fiber = self.detectors[d].setup.arms[side].fiber;
        let p = arrival_probability(&fiber);
        let lost = !self.rng.random_bool(p);
        let stats = self.node_stats.entry(node).or_default();
        stats.photons_emitted += 1;
        if lost {
            stats.photons_lost += 1;
        }
        Ok(PhotonFlight {
            source: node,
            det_id: self.detectors[d].setup.det_id,
            cycle,
            slot_id: slot,
            params,
            emit_time: t,
            arrive_time: t + fiber.delay_ns(),
            lost,
        })
    }

    /// A surviving photon reaches its detector.
    pub fn photon_arrived(&mut self, flight: &PhotonFlight) -> Result<(), PhysError> {
        let d = self.detector_index(flight.det_id)?;
        let side = self.detectors[d]
            .setup
            .arms
            .iter()
            .position(|a| a.node == flight.source)
            .ok_or(PhysError::UnknownDetector(flight.det_id))?;
        self.detectors[d].arrivals.push(Arrival {
            side,
            at: flight.arrive_time,
            source: flight.source,
            cycle: flight.cycle,
            slot: flight.slot_id,
        });
        Ok(())
    }

    /// Close time bin `bin` of detector `det_id`. Succeeds with probability
    /// `p_bsm` when exactly one photon from each side arrived in the bin.
    pub fn close_bin(
        &mut self,
        det_id: u16,
        bin: BinIndex,
        now: SimTime,
    ) -> Result<DetectorReport, PhysError> {
        let d = self.detector_index(det_id)?;
        let det = &mut self.detectors[d];
        let width = det.setup.params.bin_width_ns;

        let mut in_bin: [Vec<Arrival>; 2] = [Vec::new(), Vec::new()];
        let mut stray = 0;
        det.arrivals.retain(|a| {
            let b = bin_of(a.at.ns(), width);
            if b == bin {
                in_bin[a.side].push(*a);
                false
            } else if b < bin {
                stray += 1;
                false
            } else {
                true
            }
        });
        det.stats.bins_closed += 1;
        det.stats.stray_photons += stray;

        let coincidence = in_bin[0].len() == 1 && in_bin[1].len() == 1;
        let success = coincidence && self.rng.random_bool(det.setup.params.p_bsm);
        if success {
            det.stats.heralds_success += 1;
            let side = |a: &Arrival| Side {
                node: a.source,
                slot: a.slot,
                cycle: a.cycle,
                confirmed: None,
            };
            self.pending.push(Pending {
                det_id,
                created_at: now,
                sides: [side(&in_bin[0][0]), side(&in_bin[1][0])],
            });
        } else {
            det.stats.heralds_fail += 1;
        }
        Ok(DetectorReport {
            det_id,
            bin,
            outcome: success as u8,
        })
    }

    fn finish(&mut self, idx: usize, status: RecordStatus, pair_seq: u32) {
        let p = self.pending.swap_remove(idx);
        match status {
            RecordStatus::Accepted => {
                self.accepted += 1;
                for s in &p.sides {
                    self.truth.entry(s.node).or_default().add(pair_seq);
                }
            }
            _ => self.discarded += 1,
        }
        if self.retain_history {
            self.records.push(EntanglementRecord {
                det_id: p.det_id,
                pair_seq,
                slot_a: (p.sides[0].node, p.sides[0].slot),
                slot_b: (p.sides[1].node, p.sides[1].slot),
                created_at: p.created_at,
                status,
            });
        }
    }

    /// Apply a decoded reply to the node's memory and the registry.
    pub fn record_reply(&mut self, node: NodeId, reply: &MpReply) -> Result<SlotUpdate, PhysError> {
        let memory = self
            .memories
            .get_mut(&node)
            .ok_or(PhysError::UnknownCycle {
                node,
                cycle: reply.cycle,
            })?;
        let slot = memory
            .iter()
            .position(|s| *s == SlotState::Attempting(reply.cycle))
            .ok_or(PhysError::UnknownCycle {
                node,
                cycle: reply.cycle,
            })?;
        let new_state = match reply.outcome {
            ReplyOutcome::Success => SlotState::Entangled(reply.pair_seq),
            ReplyOutcome::Fail | ReplyOutcome::Error => SlotState::Free,
        };
        memory[slot] = new_state;
        let slot = slot as u16;

        let pending = self.pending.iter().position(|p| {
            p.sides
                .iter()
                .any(|s| s.node == node && s.cycle == reply.cycle && s.slot == slot)
        });
        match (reply.outcome, pending) {
            (ReplyOutcome::Success, None) => {
                self.violation(format!(
                    "node {node} got SUCCESS for cycle {} without a herald",
                    reply.cycle
                ));
            }
            (ReplyOutcome::Success, Some(i)) => {
                self.held.entry(node).or_default().add(reply.pair_seq);
                if self.retain_history {
                    self.held_seqs.entry(node).or_default().push(reply.pair_seq);
                }
                let p = &mut self.pending[i];
                let me = p
                    .sides
                    .iter()
                    .position(|s| s.node == node)
                    .expect("matched");
                p.sides[me].confirmed = Some(reply.pair_seq);
                if let Some(other) = p.sides[1 - me].confirmed {
                    let det_id = p.det_id;
                    if other != reply.pair_seq {
                        self.violation(format!(
                            "pair_seq disagreement {other} vs {}",
                            reply.pair_seq
                        ));
                    }
                    let d = self.detector_index(det_id)?;
                    let expected = self.detectors[d].next_pair_seq;
                    if reply.pair_seq != expected {
                        self.violation(format!(
                            "detector {det_id} pair_seq {} out of sequence, expected {expected}",
                            reply.pair_seq
                        ));
                    }
                    self.detectors[d].next_pair_seq = reply.pair_seq.wrapping_add(1);
                    self.finish(i, RecordStatus::Accepted, reply.pair_seq);
                }
            }
            (_, Some(i)) => {
                if self.pending[i].sides.iter().any(|s| s.confirmed.is_some()) {
                    self.violation(format!(
                        "cycle {} confirmed at one node and rejected at node {node}",
                        reply.cycle
                    ));
                }
                self.finish(i, RecordStatus::Discarded, 0);
            }
            (_, None) => {}
        }
        Ok(SlotUpdate {
            slot_id: slot,
            state: new_state,
        })
    }

    /// Hand an entangled qubit to the layer above, freeing the slot.
    pub fn release_slot(&mut self, node: NodeId, slot: u16) -> Result<u32, PhysError> {
        let state = self.slot_mut(node, slot)?;
        match *state {
            SlotState::Entangled(seq) => {
                *state = SlotState::Free;
                Ok(seq)
            }
            from => Err(PhysError::IllegalTransition { node, slot, from }),
        }
    }

    pub fn records(&self) -> &[EntanglementRecord] {
        &self.records
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    pub fn provisional(&self) -> usize {
        self.pending.len()
    }

    pub fn detector_stats(&self, det_id: u16) -> Option<DetectorStats> {
        self.detectors
            .iter()
            .find(|d| d.setup.det_id == det_id)
            .map(|d| d.stats)
    }

    pub fn node_stats(&self, node: NodeId) -> NodePhysStats {
        self.node_stats.get(&node).copied().unwrap_or_default()
    }

    pub fn violations(&self) -> (u64, &[String]) {
        (self.violation_count, &self.violations)
    }

    /// Check node knowledge against ground truth. Meaningful once the event
    /// queue has drained.
    pub fn check_agreement(&self) -> Result<(), String> {
        if let Some(msg) = self.violations.first() {
            return Err(msg.clone());
        }
        if !self.pending.is_empty() {
            return Err(format!("{} heralds never resolved", self.pending.len()));
        }
        let mut nodes: Vec<NodeId> = self.memories.keys().copied().collect();
        nodes.sort_unstable();
        for n in nodes {
            let held = self.held.get(&n).copied().unwrap_or_default();
            let truth = self.truth.get(&n).copied().unwrap_or_default();
            if held != truth {
                return Err(format!(
                    "node {n} holds {} pairs, ground truth has {}",
                    held.count, truth.count
                ));
            }
        }
        if self.retain_history {
            for n in self.memories.keys() {
                let mut held = self.held_seqs.get(n).cloned().unwrap_or_default();
                held.sort_unstable();
                let mut truth: Vec<u32> = self
                    .records
                    .iter()
                    .filter(|r| {
                        r.status == RecordStatus::Accepted && (r.slot_a.0 == *n || r.slot_b.0 == *n)
                    })
                    .map(|r| r.pair_seq)
                    .collect();
                truth.sort_unstable();
                if held != truth {
                    return Err(format!("node {n} pair set differs from ground truth"));
                }
            }
        }
        // Every slot still entangled must be backed by an accepted pair.
        for (n, mem) in &self.memories {
            for (i, s) in mem.iter().enumerate() {
                if let SlotState::Attempting(c) = s {
                    return Err(format!("node {n} slot {i} still attempting cycle {c}"));
                }
            }
        }
        Ok(())
    }
}
