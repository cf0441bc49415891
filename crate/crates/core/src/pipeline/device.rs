// SPDX-License-Identifier: Apache-2.0

//! A programmable device: control-plane state (tables, registers,
//! multicast groups) plus the packet-at-a-time interpreter.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::compile::*;
use super::program::{ActionCall, PipelineProgram};
use crate::engine::DeviceId;

/// Default per-packet processing delay.
pub const DEFAULT_PROCESSING_DELAY_NS: u64 = 100;

/// A packet as presented to a device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub bytes: Vec<u8>,
    pub ingress_port: u16,
    pub arrival_time_ns: u64,
}

impl Packet {
    pub fn new(bytes: Vec<u8>, ingress_port: u16, arrival_time_ns: u64) -> Self {
        Packet {
            bytes,
            ingress_port,
            arrival_time_ns,
        }
    }
}

/// What happened to a packet after the apply block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Disposition {
    /// One copy per `(egress port, bytes)`; a unicast has exactly one.
    Deliver(Vec<(u16, Vec<u8>)>),
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Trap {
    #[error("no program loaded")]
    NoProgram,
    #[error("packet of {len} bytes too short to extract header `{header}`")]
    ShortPacket { header: String, len: usize },
    #[error("register `{register}` index {index} out of range (0..{count})")]
    RegisterIndex {
        register: String,
        index: u64,
        count: u32,
    },
    #[error("division by zero")]
    DivideByZero,
    #[error("multicast group {0} does not exist")]
    UnknownGroup(u64),
    #[error("extern `{name}` failed: {reason}")]
    Extern { name: String, reason: String },
}

/// Host-side implementation of the externs a program declares. Invoked
/// synchronously while a packet executes.
pub trait ExternHandler {
    fn invoke(&mut self, device: DeviceId, name: &str, args: &[u64]) -> Result<(), String>;
}

/// Rejects every extern call.
pub struct NoExterns;

impl ExternHandler for NoExterns {
    fn invoke(&mut self, _: DeviceId, name: &str, _: &[u64]) -> Result<(), String> {
        Err(format!("no handler for `{name}`"))
    }
}

/// Records every extern call and succeeds.
#[derive(Debug, Default, Clone)]
pub struct RecordingExterns {
    pub calls: Vec<(String, Vec<u64>)>,
}

impl ExternHandler for RecordingExterns {
    fn invoke(&mut self, _: DeviceId, name: &str, args: &[u64]) -> Result<(), String> {
        self.calls.push((name.to_string(), args.to_vec()));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("no program loaded")]
    NoProgram,
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("duplicate key {key:?} in table `{table}`")]
    Duplicate { table: String, key: Vec<u64> },
    #[error("no entry with key {key:?} in table `{table}`")]
    Missing { table: String, key: Vec<u64> },
    #[error("action `{action}` not permitted by table `{table}`")]
    BadAction { table: String, action: String },
    #[error("width mismatch in table `{table}`: {detail}")]
    WidthMismatch { table: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GroupError {
    #[error("multicast group 0 is reserved")]
    Reserved,
    #[error("multicast group {0} has no ports")]
    Empty(u16),
    #[error("multicast group {0} already exists")]
    Duplicate(u16),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegisterError {
    #[error("no program loaded")]
    NoProgram,
    #[error("unknown register `{0}`")]
    Unknown(String),
    #[error("register `{register}` index {index} out of range (0..{count})")]
    OutOfRange {
        register: String,
        index: u64,
        count: u32,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub executed: u64,
    pub dropped: u64,
    pub parser_rejects: u64,
    pub unicast: u64,
    pub multicast_copies: u64,
    pub traps: u64,
}

#[derive(Debug, Clone)]
struct Binding {
    action: u16,
    args: Vec<u64>,
}

#[derive(Debug, Clone, Default)]
struct TableState {
    entries: HashMap<Vec<u64>, Binding>,
    default: Option<Binding>,
}

/// One programmable device.
pub struct Device {
    id: DeviceId,
    program: Option<Arc<CompiledProgram>>,
    tables: Vec<TableState>,
    registers: Vec<Vec<u64>>,
    groups: BTreeMap<u16, Vec<u16>>,
    processing_delay_ns: u64,
    stats: DeviceStats,
}

struct HeaderInst {
    valid: bool,
    values: Vec<u64>,
}

/// Per-packet header vector and metadata.
struct Phv {
    headers: Vec<HeaderInst>,
    meta: Vec<u64>,
    drop: bool,
}

impl Phv {
    fn read(&self, s: Slot) -> u64 {
        match s.scope {
            Scope::Meta => self.meta[s.index as usize],
            Scope::Header(h) => self.headers[h as usize].values[s.index as usize],
        }
    }

    fn write(&mut self, s: Slot, v: u64) {
        let v = v & mask(s.width);
        match s.scope {
            Scope::Meta => self.meta[s.index as usize] = v,
            Scope::Header(h) => self.headers[h as usize].values[s.index as usize] = v,
        }
    }
}

fn read_bits(bytes: &[u8], bit_offset: usize, width: u8) -> u64 {
    let mut v = 0u64;
    for i in 0..width as usize {
        let bit = bit_offset + i;
        let b = (bytes[bit / 8] >> (7 - bit % 8)) & 1;
        v = (v << 1) | b as u64;
    }
    v
}

fn write_bits(out: &mut [u8], bit_offset: usize, width: u8, value: u64) {
    for i in 0..width as usize {
        let bit = bit_offset + i;
        let b = (value >> (width as usize - 1 - i)) & 1;
        if b == 1 {
            out[bit / 8] |= 1 << (7 - bit % 8);
        }
    }
}

impl Device {
    pub fn new(id: DeviceId) -> Self {
        Device {
            id,
            program: None,
            tables: Vec::new(),
            registers: Vec::new(),
            groups: BTreeMap::new(),
            processing_delay_ns: DEFAULT_PROCESSING_DELAY_NS,
            stats: DeviceStats::default(),
        }
    }

    pub fn id(&self) -> DeviceId {
        self.id
    }

    pub fn processing_delay_ns(&self) -> u64 {
        self.processing_delay_ns
    }

    pub fn set_processing_delay_ns(&mut self, ns: u64) {
        self.processing_delay_ns = ns;
    }

    pub fn stats(&self) -> DeviceStats {
        self.stats
    }

    pub fn program(&self) -> Option<&PipelineProgram> {
        self.program.as_ref().map(|p| p.source())
    }

    /// Validate and install a program. Tables are emptied, registers zeroed
    /// and multicast groups cleared.
    pub fn load_program(&mut self, program: &PipelineProgram) -> Result<(), ProgramError> {
        let compiled = compile(program)?;
        self.tables = vec![TableState::default(); compiled.tables.len()];
        self.registers = compiled
            .registers
            .iter()
            .map(|r| vec![0; r.count as usize])
            .collect();
        self.groups.clear();
        self.program = Some(Arc::new(compiled));
        Ok(())
    }

    fn compiled(&self) -> Result<&Arc<CompiledProgram>, TableError> {
        self.program.as_ref().ok_or(TableError::NoProgram)
    }

    fn resolve_call(&self, table: &str, call: &ActionCall) -> Result<(usize, Binding), TableError> {
        let prog = self.compiled()?;
        let t = prog
            .table_index(table)
            .ok_or_else(|| TableError::UnknownTable(table.to_string()))?;
        let bad_action = || TableError::BadAction {
            table: table.to_string(),
            action: call.action.clone(),
        };
        let a = prog.action_index(&call.action).ok_or_else(bad_action)?;
        if !prog.tables[t].actions.contains(&(a as u16)) {
            return Err(bad_action());
        }
        let widths = &prog.actions[a].params;
        if widths.len() != call.args.len() {
            return Err(TableError::WidthMismatch {
                table: table.to_string(),
                detail: format!(
                    "action `{}` takes {} parameters, got {}",
                    call.action,
                    widths.len(),
                    call.args.len()
                ),
            });
        }
        for (i, (&w, &v)) in widths.iter().zip(&call.args).enumerate() {
            if v & !mask(w) != 0 {
                return Err(TableError::WidthMismatch {
                    table: table.to_string(),
                    detail: format!("parameter {i} value {v} wider than {w} bits"),
                });
            }
        }
        Ok((
            t,
            Binding {
                action: a as u16,
                args: call.args.clone(),
            },
        ))
    }

    fn check_key(&self, t: usize, table: &str, key: &[u64]) -> Result<(), TableError> {
        let spec = &self.compiled()?.tables[t];
        if spec.keys.len() != key.len() {
            return Err(TableError::WidthMismatch {
                table: table.to_string(),
                detail: format!(
                    "key has {} fields, table expects {}",
                    key.len(),
                    spec.keys.len()
                ),
            });
        }
        for (slot, &v) in spec.keys.iter().zip(key) {
            if v & !mask(slot.width) != 0 {
                return Err(TableError::WidthMismatch {
                    table: table.to_string(),
                    detail: format!("key value {v} wider than {} bits", slot.width),
                });
            }
        }
        Ok(())
    }

    pub fn install_entry(
        &mut self,
        table: &str,
        key: &[u64],
        call: &ActionCall,
    ) -> Result<(), TableError> {
        let (t, binding) = self.resolve_call(table, call)?;
        self.check_key(t, table, key)?;
        let entries = &mut self.tables[t].entries;
        if entries.contains_key(key) {
            return Err(TableError::Duplicate {
                table: table.to_string(),
                key: key.to_vec(),
            });
        }
        entries.insert(key.to_vec(), binding);
        Ok(())
    }

    /// Replace the action of an existing entry.
    pub fn modify_entry(
        &mut self,
        table: &str,
        key: &[u64],
        call: &ActionCall,
    ) -> Result<(), TableError> {
        let (t, binding) = self.resolve_call(table, call)?;
        match self.tables[t].entries.get_mut(key) {
            Some(b) => {
                *b = binding;
                Ok(())
            }
            None => Err(TableError::Missing {
                table: table.to_string(),
                key: key.to_vec(),
            }),
        }
    }

    pub fn delete_entry(&mut self, table: &str, key: &[u64]) -> Result<(), TableError> {
        let prog = self.compiled()?;
        let t = prog
            .table_index(table)
            .ok_or_else(|| TableError::UnknownTable(table.to_string()))?;
        self.tables[t]
            .entries
            .remove(key)
            .map(|_| ())
            .ok_or_else(|| TableError::Missing {
                table: table.to_string(),
                key: key.to_vec(),
            })
    }

    pub fn entry_count(&self, table: &str) -> Option<usize> {
        let t = self.program.as_ref()?.table_index(table)?;
        Some(self.tables[t].entries.len())
    }

    /// Override the table's miss action.
    pub fn set_default_action(&mut self, table: &str, call: &ActionCall) -> Result<(), TableError> {
        let (t, binding) = self.resolve_call(table, call)?;
        self.tables[t].default = Some(binding);
        Ok(())
    }

    pub fn create_mcast_group(&mut self, grp: u16, ports: &[u16]) -> Result<(), GroupError> {
        if grp == 0 {
            return Err(GroupError::Reserved);
        }
        if ports.is_empty() {
            return Err(GroupError::Empty(grp));
        }
        if self.groups.contains_key(&grp) {
            return Err(GroupError::Duplicate(grp));
        }
        self.groups.insert(grp, ports.to_vec());
        Ok(())
    }

    pub fn mcast_group(&self, grp: u16) -> Option<&[u16]> {
        self.groups.get(&grp).map(Vec::as_slice)
    }

    fn register_cell(&self, register: &str, index: u64) -> Result<(usize, usize), RegisterError> {
        let prog = self.program.as_ref().ok_or(RegisterError::NoProgram)?;
        let r = prog
            .register_index(register)
            .ok_or_else(|| RegisterError::Unknown(register.to_string()))?;
        let count = prog.registers[r].count;
        if index >= count as u64 {
            return Err(RegisterError::OutOfRange {
                register: register.to_string(),
                index,
                count,
            });
        }
        Ok((r, index as usize))
    }

    pub fn register_read(&self, register: &str, index: u64) -> Result<u64, RegisterError> {
        let (r, i) = self.register_cell(register, index)?;
        Ok(self.registers[r][i])
    }

    /// Write a register cell; the value is truncated to the cell width.
    pub fn register_write(
        &mut self,
        register: &str,
        index: u64,
        value: u64,
    ) -> Result<(), RegisterError> {
        let (r, i) = self.register_cell(register, index)?;
        let width = self.program.as_ref().expect("checked").registers[r].width;
        self.registers[r][i] = value & mask(width);
        Ok(())
    }

    /// Run one packet through parser, apply block and deparser.
    ///
    /// On a trap the packet is dropped and the trap counter incremented.
    /// Register writes made before the trap are kept.
    pub fn execute(
        &mut self,
        packet: &Packet,
        externs: &mut dyn ExternHandler,
    ) -> Result<Disposition, Trap> {
        self.stats.executed += 1;
        match self.execute_inner(packet, externs) {
            Ok((Disposition::Dropped, _)) => {
                self.stats.dropped += 1;
                Ok(Disposition::Dropped)
            }
            Ok((d @ Disposition::Deliver(_), multicast)) => {
                if let Disposition::Deliver(copies) = &d {
                    if multicast {
                        self.stats.multicast_copies += copies.len() as u64;
                    } else {
                        self.stats.unicast += 1;
                    }
                }
                Ok(d)
            }
            Err(trap) => {
                self.stats.traps += 1;
                self.stats.dropped += 1;
                Err(trap)
            }
        }
    }
}

struct Exec<'a> {
    prog: &'a CompiledProgram,
    tables: &'a [TableState],
    registers: &'a mut [Vec<u64>],
    externs: &'a mut dyn ExternHandler,
    device: DeviceId,
    phv: Phv,
    params: Vec<u64>,
}

impl Exec<'_> {
    fn eval(&self, e: &CExpr) -> Result<u64, Trap> {
        Ok(match e {
            CExpr::Const(v) => *v,
            CExpr::Field(s) => self.phv.read(*s),
            CExpr::Param(i) => self.params[*i as usize],
            CExpr::Bin(op, a, b) => {
                let a = self.eval(a)?;
                let b = self.eval(b)?;
                match op {
                    BinOp::Add => a.wrapping_add(b),
                    BinOp::Sub => a.wrapping_sub(b),
                    BinOp::Mul => a.wrapping_mul(b),
                    BinOp::Div => a.checked_div(b).ok_or(Trap::DivideByZero)?,
                    BinOp::And => a & b,
                    BinOp::Or => a | b,
                    BinOp::Xor => a ^ b,
                    BinOp::Shl => a.checked_shl(b.min(64) as u32).unwrap_or(0),
                    BinOp::Shr => a.checked_shr(b.min(64) as u32).unwrap_or(0),
                }
            }
        })
    }

    fn test(&self, c: &CCond) -> Result<bool, Trap> {
        Ok(match c {
            CCond::Cmp(op, a, b) => {
                let a = self.eval(a)?;
                let b = self.eval(b)?;
                match op {
                    CmpOp::Eq => a == b,
                    CmpOp::Ne => a != b,
                    CmpOp::Lt => a < b,
                    CmpOp::Le => a <= b,
                    CmpOp::Gt => a > b,
                    CmpOp::Ge => a >= b,
                }
            }
            CCond::All(cs) => {
                for c in cs {
                    if !self.test(c)? {
                        return Ok(false);
                    }
                }
                true
            }
            CCond::Any(cs) => {
                for c in cs {
                    if self.test(c)? {
                        return Ok(true);
                    }
                }
                false
            }
            CCond::Not(c) => !self.test(c)?,
            CCond::Valid(h) => self.phv.headers[*h as usize].valid,
        })
    }

    fn cell(&self, r: u16, index: u64) -> Result<usize, Trap> {
        let spec = &self.prog.registers[r as usize];
        if index >= spec.count as u64 {
            return Err(Trap::RegisterIndex {
                register: spec.name.clone(),
                index,
                count: spec.count,
            });
        }
        Ok(index as usize)
    }

    fn run(&mut self, block: &[CInstr]) -> Result<(), Trap> {
        for ins in block {
            match ins {
                CInstr::Apply(t) => self.apply_table(*t)?,
                CInstr::If(c, then, otherwise) => {
                    if self.test(c)? {
                        self.run(then)?;
                    } else {
                        self.run(otherwise)?;
                    }
                }
                CInstr::SetField(s, e) => {
                    let v = self.eval(e)?;
                    self.phv.write(*s, v);
                }
                CInstr::RegRead(r, idx, dest) => {
                    let i = self.cell(*r, self.eval(idx)?)?;
                    let v = self.registers[*r as usize][i];
                    self.phv.write(*dest, v);
                }
                CInstr::RegWrite(r, idx, value) => {
                    let i = self.cell(*r, self.eval(idx)?)?;
                    let v = self.eval(value)? & mask(self.prog.registers[*r as usize].width);
                    self.registers[*r as usize][i] = v;
                }
                CInstr::AddHeader(h) => {
                    let hdr = &mut self.phv.headers[*h as usize];
                    hdr.valid = true;
                    hdr.values.iter_mut().for_each(|v| *v = 0);
                }
                CInstr::RemoveHeader(h) => self.phv.headers[*h as usize].valid = false,
                CInstr::Extern(x, args) => {
                    let vals = args
                        .iter()
                        .map(|a| self.eval(a))
                        .collect::<Result<Vec<_>, _>>()?;
                    let name = &self.prog.externs[*x as usize];
                    self.externs
                        .invoke(self.device, name, &vals)
                        .map_err(|reason| Trap::Extern {
                            name: name.clone(),
                            reason,
                        })?;
                }
                CInstr::Forward(p) => {
                    let port = self.eval(p)? & 0xFFFF;
                    self.phv.meta[META_EGRESS_SPEC as usize] = port;
                    self.phv.meta[META_MCAST_GRP as usize] = 0;
                    self.phv.drop = false;
                }
                CInstr::Multicast(g) => {
                    let grp = self.eval(g)? & 0xFFFF;
                    self.phv.meta[META_MCAST_GRP as usize] = grp;
                    self.phv.meta[META_EGRESS_SPEC as usize] = EGRESS_NONE;
                    self.phv.drop = false;
                }
                CInstr::Drop => {
                    self.phv.drop = true;
                    self.phv.meta[META_EGRESS_SPEC as usize] = EGRESS_NONE;
                    self.phv.meta[META_MCAST_GRP as usize] = 0;
                }
            }
        }
        Ok(())
    }

    fn apply_table(&mut self, t: u16) -> Result<(), Trap> {
        let spec = &self.prog.tables[t as usize];
        let key: Vec<u64> = spec.keys.iter().map(|s| self.phv.read(*s)).collect();
        let state = &self.tables[t as usize];
        let (action, args) = match state.entries.get(&key) {
            Some(b) => (b.action, b.args.clone()),
            None => match &state.default {
                Some(b) => (b.action, b.args.clone()),
                None => (spec.default.0, spec.default.1.clone()),
            },
        };
        let saved = std::mem::replace(&mut self.params, args);
        let body = &self.prog.actions[action as usize].body;
        let r = self.run(body);
        self.params = saved;
        r
    }
}

impl Device {
    fn execute_inner(
        &mut self,
        packet: &Packet,
        externs: &mut dyn ExternHandler,
    ) -> Result<(Disposition, bool), Trap> {
        let prog = Arc::clone(self.program.as_ref().ok_or(Trap::NoProgram)?);

        let mut meta = vec![0u64; prog.meta_widths.len()];
        meta[META_INGRESS_PORT as usize] = packet.ingress_port as u64;
        meta[META_ARRIVAL_TIME as usize] = packet.arrival_time_ns;
        meta[META_EGRESS_SPEC as usize] = EGRESS_NONE;
        let mut phv = Phv {
            headers: prog
                .headers
                .iter()
                .map(|h| HeaderInst {
                    valid: false,
                    values: vec![0; h.widths.len()],
                })
                .collect(),
            meta,
            drop: false,
        };

        // Parser.
        let mut cursor = 0usize;
        let mut state = prog.start;
        let accepted = loop {
            let st = &prog.parser[state as usize];
            for &h in &st.extract {
                let spec = &prog.headers[h as usize];
                if packet.bytes.len() < cursor + spec.bytes {
                    return Err(Trap::ShortPacket {
                        header: spec.name.clone(),
                        len: packet.bytes.len(),
                    });
                }
                let inst = &mut phv.headers[h as usize];
                let mut bit = cursor * 8;
                for (i, &w) in spec.widths.iter().enumerate() {
                    inst.values[i] = read_bits(&packet.bytes, bit, w);
                    bit += w as usize;
                }
                inst.valid = true;
                cursor += spec.bytes;
            }
            let next = match &st.transition {
                CTransition::Go(t) => *t,
                CTransition::Select {
                    slot,
                    cases,
                    default,
                } => {
                    let v = phv.read(*slot);
                    cases
                        .iter()
                        .find(|(c, _)| *c == v)
                        .map(|(_, t)| *t)
                        .unwrap_or(*default)
                }
            };
            match next {
                Target::Accept => break true,
                Target::Reject => break false,
                Target::State(s) => state = s,
            }
        };
        if !accepted {
            self.stats.parser_rejects += 1;
            return Ok((Disposition::Dropped, false));
        }

        let mut exec = Exec {
            prog: &prog,
            tables: &self.tables,
            registers: &mut self.registers,
            externs,
            device: self.id,
            phv,
            params: Vec::new(),
        };
        exec.run(&prog.apply)?;
        let phv = exec.phv;

        if phv.drop {
            return Ok((Disposition::Dropped, false));
        }
        let grp = phv.meta[META_MCAST_GRP as usize];
        let egress = phv.meta[META_EGRESS_SPEC as usize];
        if grp == 0 && egress == EGRESS_NONE {
            return Ok((Disposition::Dropped, false));
        }

        // Deparser: valid headers in declaration order, then payload.
        let len: usize = prog
            .headers
            .iter()
            .zip(&phv.headers)
            .filter(|(_, i)| i.valid)
            .map(|(h, _)| h.bytes)
            .sum();
        let mut out = vec![0u8; len];
        let mut bit = 0usize;
        for (spec, inst) in prog.headers.iter().zip(&phv.headers) {
            if !inst.valid {
                continue;
            }
            for (&w, &v) in spec.widths.iter().zip(&inst.values) {
                write_bits(&mut out, bit, w, v);
                bit += w as usize;
            }
        }
        out.extend_from_slice(&packet.bytes[cursor..]);

        if grp != 0 {
            let ports = self
                .groups
                .get(&(grp as u16))
                .ok_or(Trap::UnknownGroup(grp))?;
            Ok((
                Disposition::Deliver(ports.iter().map(|&p| (p, out.clone())).collect()),
                true,
            ))
        } else {
            Ok((Disposition::Deliver(vec![(egress as u16, out)]), false))
        }
    }
}
