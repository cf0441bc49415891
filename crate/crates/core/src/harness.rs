// SPDX-License-Identifier: Apache-2.0

//! End-to-end runner. Wires the event engine, the physical model and the
//! three pipeline devices, runs the host-side node agents and aggregates a
//! [`MetricsReport`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{
    apply_control, derive_timing, node_device, ConfigError, Rule, Scenario, TableMutation, Testbed,
    TimingPlan, MIDPOINT, NODE_COUNT,
};
use crate::engine::{DeviceId, Engine, Event, SimTime};
use crate::mhp::{decode_reply, BinIndex, ReplyOutcome, WireMessage, CPU_PORT, EXTERN_EMIT_PHOTON};
use crate::phys::{NodeId, PhotonFlight, PhysModel, SlotState};
use crate::pipeline::{Disposition, ExternHandler, Packet, TableError};

const MAX_KEPT_TRAPS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Action {
    /// Start of a cycle.
    Tick(u32),
    /// TIMER pseudo-packet for the target node.
    Timer(u32),
    Emit(EmitRequest),
    PhotonArrive(PhotonFlight),
    CloseBin {
        det_id: u16,
        bin: BinIndex,
    },
    Packet {
        port: u16,
        bytes: Vec<u8>,
    },
    /// Frame delivered to the node's host side.
    Host(Vec<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct EmitRequest {
    qport: u16,
    slot: u16,
    cycle: u32,
    params: u16,
}

/// Collects `emit_photon` calls made while a node executes a packet.
#[derive(Default)]
struct EmitCollector {
    requests: Vec<EmitRequest>,
}

impl ExternHandler for EmitCollector {
    fn invoke(&mut self, _: DeviceId, name: &str, args: &[u64]) -> Result<(), String> {
        if name != EXTERN_EMIT_PHOTON {
            return Err(format!("unknown extern `{name}`"));
        }
        let &[qport, slot, cycle, params] = args else {
            return Err(format!("{name} takes 4 arguments, got {}", args.len()));
        };
        self.requests.push(EmitRequest {
            qport: qport as u16,
            slot: slot as u16,
            cycle: cycle as u32,
            params: params as u16,
        });
        Ok(())
    }
}

/// One host-side record of a reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub cycle: u32,
    pub outcome: ReplyOutcome,
    /// Zero unless the outcome is SUCCESS.
    pub pair_seq: u32,
    pub reply_time: SimTime,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct LatencyAcc {
    count: u64,
    min: u64,
    max: u64,
    sum: u128,
}

impl LatencyAcc {
    fn add(&mut self, ns: u64) {
        if self.count == 0 {
            self.min = ns;
            self.max = ns;
        } else {
            self.min = self.min.min(ns);
            self.max = self.max.max(ns);
        }
        self.count += 1;
        self.sum += ns as u128;
    }

    fn stats(&self) -> LatencyStats {
        LatencyStats {
            count: self.count,
            min: self.min,
            max: self.max,
            mean: if self.count == 0 {
                0.0
            } else {
                self.sum as f64 / self.count as f64
            },
        }
    }
}

/// Host-side bookkeeping of one node. Stands in for the layer above the
/// protocol: it logs replies and hands entangled qubits upward at once.
struct NodeAgent {
    node: NodeId,
    retain: bool,
    log: Vec<LogEntry>,
    digest: Sha256,
    last_cycle: Option<u32>,
    well_formed: bool,
    attempts: u64,
    successes: u64,
    failures: u64,
    errors: u64,
    last_pair_seq: u32,
    latency: LatencyAcc,
}

impl NodeAgent {
    fn new(node: NodeId) -> Self {
        NodeAgent {
            node,
            retain: true,
            log: Vec::new(),
            digest: Sha256::new(),
            last_cycle: None,
            well_formed: true,
            attempts: 0,
            successes: 0,
            failures: 0,
            errors: 0,
            last_pair_seq: 0,
            latency: LatencyAcc::default(),
        }
    }

    fn on_cpu_packet(
        &mut self,
        bytes: &[u8],
        now: SimTime,
        phys: &mut PhysModel,
        plan: &TimingPlan,
    ) -> Result<(), String> {
        let reply = decode_reply(bytes).map_err(|e| format!("node {}: {e}", self.node))?;
        let update = phys
            .record_reply(self.node, &reply)
            .map_err(|e| e.to_string())?;
        if let SlotState::Entangled(_) = update.state {
            phys.release_slot(self.node, update.slot_id)
                .map_err(|e| e.to_string())?;
        }

        let entry = LogEntry {
            cycle: reply.cycle,
            outcome: reply.outcome,
            pair_seq: reply.pair_seq,
            reply_time: now,
        };
        if self.last_cycle.is_some_and(|c| c >= entry.cycle)
            || (entry.outcome == ReplyOutcome::Success) != (entry.pair_seq > 0)
        {
            self.well_formed = false;
        }
        self.last_cycle = Some(entry.cycle);
        self.digest.update(entry.cycle.to_be_bytes());
        self.digest.update([entry.outcome as u8]);
        self.digest.update(entry.pair_seq.to_be_bytes());
        match entry.outcome {
            ReplyOutcome::Success => {
                self.successes += 1;
                self.last_pair_seq = entry.pair_seq;
            }
            ReplyOutcome::Fail => self.failures += 1,
            ReplyOutcome::Error => self.errors += 1,
        }
        self.latency
            .add(now.ns() - plan.timer(self.node, entry.cycle));
        if self.retain {
            self.log.push(entry);
        }
        Ok(())
    }

    /// Outcome sequence digest, comparable across nodes.
    fn fingerprint(&self) -> Vec<u8> {
        self.digest.clone().finalize().to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: NodeId,
    pub attempts: u64,
    pub successes: u64,
    pub failures: u64,
    pub errors: u64,
    pub photons_lost: u64,
    pub reply_latency_ns: LatencyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorMetrics {
    pub det_id: u16,
    pub bins_closed: u64,
    pub heralds_success: u64,
    pub heralds_fail: u64,
    pub stray_photons: u64,
    pub accepted: u64,
    pub discarded: u64,
}

/// Aggregate outcome of one run. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub scenario_digest: String,
    pub seed: u64,
    pub cycles: u32,
    pub sim_time_ns: u64,
    pub nodes: Vec<NodeMetrics>,
    pub detectors: Vec<DetectorMetrics>,
    /// Successes over attempts at the first node.
    pub success_fraction: f64,
    pub pair_seq_final: u32,
    pub agreement: bool,
    pub traps: u64,
}

/// One scenario instance.
pub struct Simulation {
    scenario: Scenario,
    seed: u64,
    plan: TimingPlan,
    engine: Engine<Action>,
    testbed: Testbed,
    phys: PhysModel,
    agents: Vec<NodeAgent>,
    links: HashMap<(DeviceId, u16), (DeviceId, u16, u64)>,
    det_id: u16,
    cycles: u32,
    stopped: bool,
    traps: u64,
    trap_log: Vec<String>,
}

impl Simulation {
    /// Validate, build devices, install control state and schedule the
    /// first cycle.
    pub fn new(scenario: &Scenario, seed: u64) -> Result<Self, ConfigError> {
        scenario.validate()?;
        let fail = |rule: Rule, detail: String| ConfigError {
            field: "scenario".into(),
            rule,
            detail,
        };
        let mut testbed =
            Testbed::load(scenario).map_err(|e| fail(Rule::InvalidValue, e.to_string()))?;
        apply_control(scenario, &mut testbed)
            .map_err(|e| fail(Rule::DuplicateTableKey, e.to_string()))?;

        let nodes: Vec<(NodeId, u16)> = (0..NODE_COUNT as NodeId)
            .map(|k| (k, scenario.nodes[k as usize].slots))
            .collect();
        let phys = PhysModel::new(seed, &nodes, vec![scenario.detector_setup()]);

        let mut links = HashMap::new();
        for arm in &scenario.midpoint.arms {
            let delay = scenario.fiber(arm.node).delay_ns();
            let node = node_device(arm.node);
            links.insert((node, arm.cport), (MIDPOINT, arm.port, delay));
            links.insert((MIDPOINT, arm.port), (node, arm.cport, delay));
        }

        let plan = derive_timing(scenario);
        let mut engine = Engine::new();
        if scenario.run.max_cycles != Some(0) {
            engine
                .schedule(SimTime(plan.master_tick(0)), MIDPOINT, Action::Tick(0))
                .expect("engine starts at zero");
        }
        Ok(Simulation {
            scenario: scenario.clone(),
            seed,
            plan,
            engine,
            testbed,
            phys,
            agents: (0..NODE_COUNT as NodeId).map(NodeAgent::new).collect(),
            links,
            det_id: scenario.midpoint.detector.det_id,
            cycles: 0,
            stopped: false,
            traps: 0,
            trap_log: Vec::new(),
        })
    }

    /// Keep per-reply logs and per-pair records. On by default; without it
    /// memory stays flat in the number of cycles.
    pub fn set_retain_history(&mut self, retain: bool) {
        self.phys.set_retain_history(retain);
        for a in &mut self.agents {
            a.retain = retain;
        }
    }

    pub fn plan(&self) -> &TimingPlan {
        &self.plan
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn phys(&self) -> &PhysModel {
        &self.phys
    }

    pub fn testbed(&self) -> &Testbed {
        &self.testbed
    }

    /// Replies seen by node `k`, in arrival order.
    pub fn log(&self, k: NodeId) -> &[LogEntry] {
        &self.agents[k as usize].log
    }

    pub fn traps(&self) -> u64 {
        self.traps
    }

    /// The first few trap messages.
    pub fn trap_messages(&self) -> &[String] {
        &self.trap_log
    }

    /// Change a device's tables while the simulation is paused.
    pub fn mutate(&mut self, device: DeviceId, m: &TableMutation) -> Result<(), TableError> {
        let dev = self
            .testbed
            .device_mut(device)
            .ok_or_else(|| TableError::UnknownTable(format!("device {}", device.0)))?;
        m.apply(dev)
    }

    /// Feed a raw frame to node `k`'s host side, as if from its CPU port.
    pub fn inject_host_frame(&mut self, k: NodeId, bytes: Vec<u8>) {
        self.engine
            .schedule_in(0, node_device(k), Action::Host(bytes));
    }

    fn trap(&mut self, msg: String) {
        self.traps += 1;
        if self.trap_log.len() < MAX_KEPT_TRAPS {
            self.trap_log.push(msg);
        }
    }

    /// Dispatch events up to and including `until`.
    pub fn run_until(&mut self, until: SimTime) {
        while let Some(ev) = self.engine.next_event(until) {
            self.dispatch(ev);
        }
    }

    /// Run to quiescence and report.
    pub fn run(mut self) -> MetricsReport {
        self.run_until(SimTime(u64::MAX));
        self.report()
    }

    fn dispatch(&mut self, ev: Event<Action>) {
        let now = self.engine.now();
        match ev.payload {
            Action::Tick(c) => self.start_cycle(c),
            Action::Timer(c) => {
                let bytes = WireMessage::Timer { cycle: c }.encode();
                self.execute(ev.target, CPU_PORT, bytes);
            }
            Action::Emit(r) => {
                let k = ev.target.0;
                match self
                    .phys
                    .emit_photon(k, r.qport, r.slot, r.cycle, r.params, now)
                {
                    Ok(flight) => {
                        self.agents[k as usize].attempts += 1;
                        if !flight.lost {
                            self.engine.schedule_in(
                                flight.arrive_time - now,
                                MIDPOINT,
                                Action::PhotonArrive(flight),
                            );
                        }
                    }
                    Err(e) => self.trap(e.to_string()),
                }
            }
            Action::PhotonArrive(flight) => {
                if let Err(e) = self.phys.photon_arrived(&flight) {
                    self.trap(e.to_string());
                }
            }
            Action::CloseBin { det_id, bin } => match self.phys.close_bin(det_id, bin, now) {
                Ok(report) => self.execute(MIDPOINT, CPU_PORT, report.encode()),
                Err(e) => self.trap(e.to_string()),
            },
            Action::Packet { port, bytes } => self.execute(ev.target, port, bytes),
            Action::Host(bytes) => {
                let k = ev.target.0 as usize;
                if let Err(e) =
                    self.agents[k].on_cpu_packet(&bytes, now, &mut self.phys, &self.plan)
                {
                    self.trap(e);
                }
            }
        }
    }

    fn start_cycle(&mut self, c: u32) {
        if let Some(k) = self.scenario.run.stop_after_successes {
            if self.agents[0].successes >= k {
                self.stopped = true;
                return;
            }
        }
        let faults: Vec<_> = self
            .scenario
            .faults
            .iter()
            .filter(|f| f.at_cycle == c)
            .copied()
            .collect();
        for f in faults {
            if let Err(e) = self.mutate(
                node_device(f.node),
                &TableMutation::gen_default(&f.gen_default),
            ) {
                self.trap(e.to_string());
            }
        }

        self.cycles = c + 1;
        let now = self.engine.now().ns();
        for k in 0..NODE_COUNT as NodeId {
            self.engine.schedule_in(
                self.plan.timer(k, c) - now,
                node_device(k),
                Action::Timer(c),
            );
        }
        self.engine.schedule_in(
            self.plan.report(c) - now,
            MIDPOINT,
            Action::CloseBin {
                det_id: self.det_id,
                bin: self.plan.bin(c),
            },
        );
        let more = match self.scenario.run.max_cycles {
            Some(n) => c + 1 < n,
            None => c < u32::MAX,
        };
        if more {
            self.engine.schedule_in(
                self.plan.master_tick(c + 1) - now,
                MIDPOINT,
                Action::Tick(c + 1),
            );
        }
    }

    fn execute(&mut self, target: DeviceId, port: u16, bytes: Vec<u8>) {
        let now = self.engine.now();
        let packet = Packet::new(bytes, port, now.ns());
        let mut externs = EmitCollector::default();
        let device = self
            .testbed
            .device_mut(target)
            .expect("events target existing devices");
        let delay = device.processing_delay_ns();
        let outcome = device.execute(&packet, &mut externs);
        match outcome {
            Err(trap) => self.trap(format!("device {}: {trap}", target.0)),
            Ok(Disposition::Dropped) => {}
            Ok(Disposition::Deliver(copies)) => {
                for (out, bytes) in copies {
                    if target != MIDPOINT && out == CPU_PORT {
                        self.engine.schedule_in(delay, target, Action::Host(bytes));
                    } else if let Some(&(peer, peer_port, latency)) = self.links.get(&(target, out))
                    {
                        self.engine.schedule_in(
                            delay + latency,
                            peer,
                            Action::Packet {
                                port: peer_port,
                                bytes,
                            },
                        );
                    } else {
                        self.trap(format!("device {}: port {out} is not connected", target.0));
                    }
                }
            }
        }
        for r in externs.requests {
            self.engine.schedule_in(delay, target, Action::Emit(r));
        }
    }

    /// Aggregate the run so far. Meaningful once the queue has drained.
    pub fn report(&self) -> MetricsReport {
        let nodes: Vec<NodeMetrics> = self
            .agents
            .iter()
            .map(|a| NodeMetrics {
                node: a.node,
                attempts: a.attempts,
                successes: a.successes,
                failures: a.failures,
                errors: a.errors,
                photons_lost: self.phys.node_stats(a.node).photons_lost,
                reply_latency_ns: a.latency.stats(),
            })
            .collect();
        let det = self.phys.detector_stats(self.det_id).unwrap_or_default();
        let detectors = vec![DetectorMetrics {
            det_id: self.det_id,
            bins_closed: det.bins_closed,
            heralds_success: det.heralds_success,
            heralds_fail: det.heralds_fail,
            stray_photons: det.stray_photons,
            accepted: self.phys.accepted(),
            discarded: self.phys.discarded(),
        }];

        let (a, b) = (&self.agents[0], &self.agents[1]);
        let agreement = a.well_formed
            && b.well_formed
            && (a.successes, a.failures, a.errors) == (b.successes, b.failures, b.errors)
            && a.fingerprint() == b.fingerprint()
            && self.phys.check_agreement().is_ok();

        MetricsReport {
            scenario: self.scenario.name.clone(),
            scenario_digest: self.scenario.digest(),
            seed: self.seed,
            cycles: self.cycles,
            sim_time_ns: self.engine.now().ns(),
            success_fraction: if a.attempts == 0 {
                0.0
            } else {
                a.successes as f64 / a.attempts as f64
            },
            pair_seq_final: self
                .agents
                .iter()
                .map(|a| a.last_pair_seq)
                .max()
                .unwrap_or(0),
            nodes,
            detectors,
            agreement,
            traps: self.traps,
        }
    }

    /// True once a stop condition ended the cycle loop early.
    pub fn stopped_early(&self) -> bool {
        self.stopped
    }
}

/// Run a scenario to quiescence.
pub fn run_scenario(scenario: &Scenario, seed: u64) -> Result<MetricsReport, ConfigError> {
    Ok(Simulation::new(scenario, seed)?.run())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Json,
    CsvSummary,
}

/// Serialize a report. Identical reports give identical bytes.
pub fn emit_report(report: &MetricsReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).expect("report serializes");
            out.push(b'\n');
            out
        }
        ReportFormat::CsvSummary => csv_summary(report),
    }
}

fn csv_summary(r: &MetricsReport) -> Vec<u8> {
    let mut header: Vec<String> = [
        "scenario",
        "scenario_digest",
        "seed",
        "cycles",
        "sim_time_ns",
        "success_fraction",
        "pair_seq_final",
        "agreement",
        "traps",
    ]
    .map(String::from)
    .to_vec();
    let mut row = vec![
        r.scenario.clone(),
        r.scenario_digest.clone(),
        r.seed.to_string(),
        r.cycles.to_string(),
        r.sim_time_ns.to_string(),
        r.success_fraction.to_string(),
        r.pair_seq_final.to_string(),
        r.agreement.to_string(),
        r.traps.to_string(),
    ];
    for n in &r.nodes {
        let l = &n.reply_latency_ns;
        for (name, value) in [
            ("attempts", n.attempts.to_string()),
            ("successes", n.successes.to_string()),
            ("failures", n.failures.to_string()),
            ("errors", n.errors.to_string()),
            ("photons_lost", n.photons_lost.to_string()),
            ("latency_min_ns", l.min.to_string()),
            ("latency_max_ns", l.max.to_string()),
            ("latency_mean_ns", l.mean.to_string()),
        ] {
            header.push(format!("node{}_{name}", n.node));
            row.push(value);
        }
    }
    for d in &r.detectors {
        for (name, value) in [
            ("bins_closed", d.bins_closed),
            ("heralds_success", d.heralds_success),
            ("heralds_fail", d.heralds_fail),
            ("accepted", d.accepted),
            ("discarded", d.discarded),
        ] {
            header.push(format!("det{}_{name}", d.det_id));
            row.push(value.to_string());
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    w.write_record(&row).expect("in-memory write");
    w.into_inner().expect("in-memory flush")
}
