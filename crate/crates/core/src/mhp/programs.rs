// SPDX-License-Identifier: Apache-2.0

//! Builders for the node and heralding-station pipeline programs.

use serde::{Deserialize, Serialize};

use crate::pipeline::{
    ActionCall, ActionSpec, Cond, Expr, FieldSpec, HeaderSpec, Instruction, ParserState,
    PipelineProgram, RegisterSpec, SelectCase, TableSpec, Transition,
};

use super::wire::{MSG_DETECTOR, MSG_GEN, MSG_MP_REPLY, MSG_TIMER};

pub const GEN_TBL: &str = "gen_tbl";
pub const MP_TBL: &str = "mp_tbl";
pub const DET_TBL: &str = "det_tbl";
pub const ACTION_GEN: &str = "gen";
pub const ACTION_SET_PEER: &str = "set_peer";
pub const ACTION_SET_PAIR: &str = "set_pair";
pub const ACTION_NO_OP: &str = "no_op";
pub const EXTERN_EMIT_PHOTON: &str = "emit_photon";

/// The device port facing the host hardware.
pub const CPU_PORT: u16 = 0;

/// Register capacity of the heralding-station program, indexed by port.
pub const MIDPOINT_PORTS: u32 = 16;
/// Register capacity of the heralding-station program, indexed by detector.
pub const MIDPOINT_DETECTORS: u32 = 16;

/// A quantum interface and the classical interface paired with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortPair {
    pub qport: u16,
    pub cport: u16,
}

/// Port map of one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodePorts {
    pub pairs: Vec<PortPair>,
}

impl NodePorts {
    pub fn single(qport: u16, cport: u16) -> Self {
        NodePorts {
            pairs: vec![PortPair { qport, cport }],
        }
    }

    pub fn classical(&self) -> impl Iterator<Item = u16> + '_ {
        self.pairs.iter().map(|p| p.cport)
    }
}

/// `gen(qport, cport, qubit_slot, attempt_params)` as a table action call.
pub fn gen_call(qport: u16, cport: u16, qubit_slot: u16, attempt_params: u16) -> ActionCall {
    ActionCall::new(
        ACTION_GEN,
        &[
            qport as u64,
            cport as u64,
            qubit_slot as u64,
            attempt_params as u64,
        ],
    )
}

pub fn set_peer_call(other_port: u16, mcast_grp: u16, det_id: u16) -> ActionCall {
    ActionCall::new(
        ACTION_SET_PEER,
        &[other_port as u64, mcast_grp as u64, det_id as u64],
    )
}

pub fn set_pair_call(port_a: u16, port_b: u16, mcast_grp: u16) -> ActionCall {
    ActionCall::new(
        ACTION_SET_PAIR,
        &[port_a as u64, port_b as u64, mcast_grp as u64],
    )
}

pub fn no_op_call() -> ActionCall {
    ActionCall::new(ACTION_NO_OP, &[])
}

fn field(name: &str, width: u8) -> FieldSpec {
    FieldSpec {
        name: name.to_string(),
        width,
    }
}

fn header(name: &str, fields: &[(&str, u8)]) -> HeaderSpec {
    HeaderSpec {
        name: name.to_string(),
        fields: fields.iter().map(|(n, w)| field(n, *w)).collect(),
    }
}

/// Header layout shared by both programs. Declaration order is deparse
/// order: a GEN is `mhp|timer|gen`, a reply is `mhp|reply`.
fn mhp_headers() -> Vec<HeaderSpec> {
    vec![
        header("mhp", &[("msg_type", 8)]),
        header("timer", &[("cycle", 32)]),
        header("gen", &[("qubit_slot", 16), ("attempt_params", 16)]),
        header("detector", &[("outcome", 8), ("det_id", 16), ("bin", 32)]),
        header("reply", &[("outcome", 8), ("cycle", 32), ("pair_seq", 32)]),
    ]
}

fn state(name: &str, extract: &[&str], transition: Transition) -> ParserState {
    ParserState {
        name: name.to_string(),
        extract: extract.iter().map(|s| s.to_string()).collect(),
        transition,
    }
}

fn select_msg_type(cases: &[(u8, &str)]) -> Transition {
    Transition::Select {
        field: "mhp.msg_type".parse().expect("static"),
        cases: cases
            .iter()
            .map(|(v, next)| SelectCase {
                value: *v as u64,
                next: next.to_string(),
            })
            .collect(),
        default: "reject".to_string(),
    }
}

fn c(v: u64) -> Expr {
    Expr::Const(v)
}

fn f(name: &str) -> Expr {
    Expr::field(name)
}

fn p(name: &str) -> Expr {
    Expr::param(name)
}

fn ne(a: Expr, b: Expr) -> Cond {
    Cond::Ne(a, b)
}

/// Node program: a TIMER pseudo-packet on the CPU port is looked up in
/// `gen_tbl`; `gen` emits a photon through the `emit_photon` extern, turns
/// the timer into a GEN and sends it out of the paired classical port.
/// MP_REPLY frames arriving on a classical port go up to the CPU port.
pub fn build_node_program(ports: &NodePorts) -> PipelineProgram {
    let gen = ActionSpec {
        name: ACTION_GEN.to_string(),
        params: vec![
            field("qport", 16),
            field("cport", 16),
            field("qubit_slot", 16),
            field("attempt_params", 16),
        ],
        body: vec![
            Instruction::Extern {
                name: EXTERN_EMIT_PHOTON.to_string(),
                args: vec![
                    p("qport"),
                    p("qubit_slot"),
                    f("timer.cycle"),
                    p("attempt_params"),
                ],
            },
            Instruction::add_header("gen"),
            Instruction::set("gen.qubit_slot", p("qubit_slot")),
            Instruction::set("gen.attempt_params", p("attempt_params")),
            Instruction::set("mhp.msg_type", c(MSG_GEN as u64)),
            Instruction::Forward { port: p("cport") },
        ],
    };
    let no_op = ActionSpec {
        name: ACTION_NO_OP.to_string(),
        params: vec![],
        body: vec![Instruction::Drop],
    };

    let from_classical = Cond::Any(
        ports
            .classical()
            .map(|port| Cond::eq(f("meta.ingress_port"), c(port as u64)))
            .collect(),
    );

    PipelineProgram {
        headers: mhp_headers(),
        metadata: vec![],
        parser: vec![
            state(
                "start",
                &["mhp"],
                select_msg_type(&[(MSG_TIMER, "parse_timer"), (MSG_MP_REPLY, "parse_reply")]),
            ),
            state("parse_timer", &["timer"], Transition::Accept),
            state("parse_reply", &["reply"], Transition::Accept),
        ],
        actions: vec![gen, no_op],
        tables: vec![TableSpec {
            name: GEN_TBL.to_string(),
            keys: vec!["timer.cycle".parse().expect("static")],
            actions: vec![ACTION_GEN.to_string(), ACTION_NO_OP.to_string()],
            default_action: no_op_call(),
        }],
        registers: vec![],
        externs: vec![EXTERN_EMIT_PHOTON.to_string()],
        apply: vec![Instruction::if_else(
            Cond::All(vec![
                Cond::valid("timer"),
                Cond::eq(f("meta.ingress_port"), c(CPU_PORT as u64)),
            ]),
            vec![Instruction::apply(GEN_TBL)],
            vec![Instruction::if_else(
                Cond::All(vec![Cond::valid("reply"), from_classical]),
                vec![Instruction::Forward {
                    port: c(CPU_PORT as u64),
                }],
                vec![Instruction::Drop],
            )],
        )],
    }
}

/// Heralding-station program. GEN frames and per-cycle DETECTOR reports are
/// parked in registers; whichever of the three arrives last completes the
/// correlation and multicasts an MP_REPLY to both nodes.
pub fn build_midpoint_program(bin_width_ns: u64) -> PipelineProgram {
    assert!(bin_width_ns > 0, "bin width must be positive");

    let by_port = |name: &str, width: u8| RegisterSpec {
        name: name.to_string(),
        width,
        count: MIDPOINT_PORTS,
    };
    let by_det = |name: &str, width: u8| RegisterSpec {
        name: name.to_string(),
        width,
        count: MIDPOINT_DETECTORS,
    };
    let registers = vec![
        by_port("gen_cycle", 32),
        by_port("gen_slot", 16),
        by_port("gen_params", 16),
        by_port("gen_time", 64),
        by_port("gen_valid", 1),
        by_det("det_outcome", 8),
        by_det("det_bin", 32),
        by_det("det_valid", 1),
        by_det("pair_seq", 32),
    ];

    let metadata = vec![
        field("port", 16),
        field("peer", 16),
        field("grp", 16),
        field("det", 16),
        field("hit", 1),
        field("valid_p", 1),
        field("valid_q", 1),
        field("valid_d", 1),
        field("cycle_p", 32),
        field("cycle_q", 32),
        field("params_p", 16),
        field("params_q", 16),
        field("time_p", 64),
        field("time_q", 64),
        field("bin_d", 32),
        field("outcome_d", 8),
        field("seq", 32),
    ];

    let set_peer = ActionSpec {
        name: ACTION_SET_PEER.to_string(),
        params: vec![
            field("other_port", 16),
            field("mcast_grp", 16),
            field("det_id", 16),
        ],
        body: vec![
            Instruction::set("meta.peer", p("other_port")),
            Instruction::set("meta.grp", p("mcast_grp")),
            Instruction::set("meta.det", p("det_id")),
            Instruction::set("meta.hit", c(1)),
        ],
    };
    let set_pair = ActionSpec {
        name: ACTION_SET_PAIR.to_string(),
        params: vec![
            field("port_a", 16),
            field("port_b", 16),
            field("mcast_grp", 16),
        ],
        body: vec![
            Instruction::set("meta.port", p("port_a")),
            Instruction::set("meta.peer", p("port_b")),
            Instruction::set("meta.grp", p("mcast_grp")),
            Instruction::set("meta.hit", c(1)),
        ],
    };
    let no_op = ActionSpec {
        name: ACTION_NO_OP.to_string(),
        params: vec![],
        body: vec![Instruction::set("meta.hit", c(0))],
    };

    let on_gen = vec![
        Instruction::set("meta.port", f("meta.ingress_port")),
        Instruction::reg_write("gen_cycle", f("meta.port"), f("timer.cycle")),
        Instruction::reg_write("gen_slot", f("meta.port"), f("gen.qubit_slot")),
        Instruction::reg_write("gen_params", f("meta.port"), f("gen.attempt_params")),
        Instruction::reg_write("gen_time", f("meta.port"), f("meta.arrival_time_ns")),
        Instruction::reg_write("gen_valid", f("meta.port"), c(1)),
        Instruction::apply(MP_TBL),
    ];
    let on_detector = vec![
        Instruction::set("meta.det", f("detector.det_id")),
        Instruction::reg_write("det_outcome", f("meta.det"), f("detector.outcome")),
        Instruction::reg_write("det_bin", f("meta.det"), f("detector.bin")),
        Instruction::reg_write("det_valid", f("meta.det"), c(1)),
        Instruction::apply(DET_TBL),
    ];

    // Bin of a stored GEN arrival time, truncated to the 32-bit wire field.
    let bin = |t: &str| {
        Expr::And(
            Box::new(Expr::div(f(t), c(bin_width_ns))),
            Box::new(c(0xFFFF_FFFF)),
        )
    };

    let reply_header = vec![
        Instruction::remove_header("timer"),
        Instruction::remove_header("gen"),
        Instruction::remove_header("detector"),
        Instruction::add_header("reply"),
        Instruction::set("mhp.msg_type", c(MSG_MP_REPLY as u64)),
        // The smaller cycle, so that an inconsistent pair gets the same
        // reply whichever frame arrived last.
        Instruction::if_else(
            Cond::Le(f("meta.cycle_p"), f("meta.cycle_q")),
            vec![Instruction::set("reply.cycle", f("meta.cycle_p"))],
            vec![Instruction::set("reply.cycle", f("meta.cycle_q"))],
        ),
    ];
    let verdict = Instruction::if_else(
        Cond::Any(vec![
            ne(f("meta.cycle_p"), f("meta.cycle_q")),
            ne(f("meta.params_p"), f("meta.params_q")),
        ]),
        vec![Instruction::set("reply.outcome", c(2))],
        vec![Instruction::if_else(
            Cond::eq(f("meta.outcome_d"), c(1)),
            vec![
                Instruction::reg_read("pair_seq", f("meta.det"), "meta.seq"),
                Instruction::set("meta.seq", Expr::add(f("meta.seq"), c(1))),
                Instruction::reg_write("pair_seq", f("meta.det"), f("meta.seq")),
                Instruction::set("reply.outcome", c(1)),
                Instruction::set("reply.pair_seq", f("meta.seq")),
            ],
            vec![Instruction::set("reply.outcome", c(0))],
        )],
    );
    let mut complete = reply_header;
    complete.push(verdict);
    complete.extend([
        Instruction::reg_write("gen_valid", f("meta.port"), c(0)),
        Instruction::reg_write("gen_valid", f("meta.peer"), c(0)),
        Instruction::reg_write("det_valid", f("meta.det"), c(0)),
        Instruction::Multicast {
            group: f("meta.grp"),
        },
    ]);

    let completion_check = vec![
        Instruction::reg_read("gen_valid", f("meta.port"), "meta.valid_p"),
        Instruction::reg_read("gen_valid", f("meta.peer"), "meta.valid_q"),
        Instruction::reg_read("det_valid", f("meta.det"), "meta.valid_d"),
        Instruction::reg_read("gen_cycle", f("meta.port"), "meta.cycle_p"),
        Instruction::reg_read("gen_cycle", f("meta.peer"), "meta.cycle_q"),
        Instruction::reg_read("gen_params", f("meta.port"), "meta.params_p"),
        Instruction::reg_read("gen_params", f("meta.peer"), "meta.params_q"),
        Instruction::reg_read("gen_time", f("meta.port"), "meta.time_p"),
        Instruction::reg_read("gen_time", f("meta.peer"), "meta.time_q"),
        Instruction::reg_read("det_bin", f("meta.det"), "meta.bin_d"),
        Instruction::reg_read("det_outcome", f("meta.det"), "meta.outcome_d"),
        Instruction::if_else(
            Cond::All(vec![
                Cond::eq(f("meta.valid_p"), c(1)),
                Cond::eq(f("meta.valid_q"), c(1)),
                Cond::eq(f("meta.valid_d"), c(1)),
                Cond::eq(bin("meta.time_p"), bin("meta.time_q")),
                Cond::eq(bin("meta.time_p"), f("meta.bin_d")),
            ]),
            complete,
            vec![Instruction::Drop],
        ),
    ];

    PipelineProgram {
        headers: mhp_headers(),
        metadata,
        parser: vec![
            state(
                "start",
                &["mhp"],
                select_msg_type(&[(MSG_GEN, "parse_gen"), (MSG_DETECTOR, "parse_detector")]),
            ),
            state("parse_gen", &["timer", "gen"], Transition::Accept),
            state("parse_detector", &["detector"], Transition::Accept),
        ],
        actions: vec![set_peer, set_pair, no_op],
        tables: vec![
            TableSpec {
                name: MP_TBL.to_string(),
                keys: vec!["meta.ingress_port".parse().expect("static")],
                actions: vec![ACTION_SET_PEER.to_string(), ACTION_NO_OP.to_string()],
                default_action: no_op_call(),
            },
            TableSpec {
                name: DET_TBL.to_string(),
                keys: vec!["detector.det_id".parse().expect("static")],
                actions: vec![ACTION_SET_PAIR.to_string(), ACTION_NO_OP.to_string()],
                default_action: no_op_call(),
            },
        ],
        registers,
        externs: vec![],
        apply: vec![
            Instruction::if_else(
                Cond::All(vec![
                    Cond::valid("gen"),
                    ne(f("meta.ingress_port"), c(CPU_PORT as u64)),
                ]),
                on_gen,
                vec![Instruction::if_else(
                    Cond::All(vec![
                        Cond::valid("detector"),
                        Cond::eq(f("meta.ingress_port"), c(CPU_PORT as u64)),
                    ]),
                    on_detector,
                    vec![],
                )],
            ),
            Instruction::if_else(
                Cond::eq(f("meta.hit"), c(1)),
                completion_check,
                vec![Instruction::Drop],
            ),
        ],
    }
}
