// SPDX-License-Identifier: Apache-2.0

//! Static validation of a [`PipelineProgram`] and lowering into an
//! index-resolved form the interpreter executes.
//!
//! Validation rules, each reported as a [`ProgramError`] with a location
//! path into the document:
//!
//! * names are unique within their namespace;
//! * every reference (header, field, action, table, register, extern,
//!   parser state, action parameter) resolves;
//! * field and register widths are 1..=64 bits, headers are whole bytes,
//!   registers have at least one cell;
//! * the parser has a `start` state and its transition graph is acyclic;
//! * assignments never narrow: the destination is at least as wide as every
//!   field, parameter or register feeding it, and constants fit;
//! * table default actions are in the table's permitted action list and
//!   carry correctly sized arguments;
//! * tables are applied only from the apply block, never from an action.

use std::collections::HashMap;

use thiserror::Error;

use super::program::*;

/// Standard metadata fields present in every program, in slot order.
pub const STD_META: [(&str, u8); 4] = [
    ("ingress_port", 16),
    ("arrival_time_ns", 64),
    ("egress_spec", 16),
    ("mcast_grp", 16),
];
pub(crate) const META_INGRESS_PORT: u16 = 0;
pub(crate) const META_ARRIVAL_TIME: u16 = 1;
pub(crate) const META_EGRESS_SPEC: u16 = 2;
pub(crate) const META_MCAST_GRP: u16 = 3;

/// `egress_spec` value meaning "no unicast decision".
pub const EGRESS_NONE: u64 = 0xFFFF;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{location}: {kind}")]
pub struct ProgramError {
    pub location: String,
    pub kind: ProgramErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgramErrorKind {
    #[error("duplicate {what} `{name}`")]
    Duplicate { what: &'static str, name: String },
    #[error("unresolved {what} `{name}`")]
    Unresolved { what: &'static str, name: String },
    #[error("invalid width {width} (must be 1..=64)")]
    BadWidth { width: u8 },
    #[error("header `{name}` is {bits} bits, not a whole number of bytes")]
    UnalignedHeader { name: String, bits: u32 },
    #[error("register `{name}` has no cells")]
    EmptyRegister { name: String },
    #[error("parser has no `start` state")]
    NoStartState,
    #[error("non-terminating parser: cycle through state `{state}`")]
    ParserCycle { state: String },
    #[error("width mismatch: {detail}")]
    WidthMismatch { detail: String },
    #[error("action `{action}` not permitted by table `{table}`")]
    ActionNotPermitted { table: String, action: String },
    #[error("action `{action}` takes {expected} arguments, got {actual}")]
    Arity {
        action: String,
        expected: usize,
        actual: usize,
    },
    #[error("table `{table}` applied inside an action")]
    ApplyInAction { table: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Scope {
    Header(u16),
    Meta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub scope: Scope,
    pub index: u16,
    pub width: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

#[derive(Debug, Clone)]
pub(crate) enum CExpr {
    Const(u64),
    Field(Slot),
    Param(u16),
    Bin(BinOp, Box<CExpr>, Box<CExpr>),
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone)]
pub(crate) enum CCond {
    Cmp(CmpOp, CExpr, CExpr),
    All(Vec<CCond>),
    Any(Vec<CCond>),
    Not(Box<CCond>),
    Valid(u16),
}

#[derive(Debug, Clone)]
pub(crate) enum CInstr {
    Apply(u16),
    If(CCond, Vec<CInstr>, Vec<CInstr>),
    SetField(Slot, CExpr),
    RegRead(u16, CExpr, Slot),
    RegWrite(u16, CExpr, CExpr),
    AddHeader(u16),
    RemoveHeader(u16),
    Extern(u16, Vec<CExpr>),
    Forward(CExpr),
    Multicast(CExpr),
    Drop,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Target {
    Accept,
    Reject,
    State(u16),
}

#[derive(Debug, Clone)]
pub(crate) enum CTransition {
    Go(Target),
    Select {
        slot: Slot,
        cases: Vec<(u64, Target)>,
        default: Target,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct CState {
    pub extract: Vec<u16>,
    pub transition: CTransition,
}

#[derive(Debug, Clone)]
pub(crate) struct CHeader {
    pub name: String,
    pub widths: Vec<u8>,
    pub bytes: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct CAction {
    pub name: String,
    pub params: Vec<u8>,
    pub body: Vec<CInstr>,
}

#[derive(Debug, Clone)]
pub(crate) struct CTable {
    pub name: String,
    pub keys: Vec<Slot>,
    pub actions: Vec<u16>,
    pub default: (u16, Vec<u64>),
}

#[derive(Debug, Clone)]
pub(crate) struct CRegister {
    pub name: String,
    pub width: u8,
    pub count: u32,
}

/// A validated program with all names resolved to indices.
#[derive(Debug, Clone)]
pub struct CompiledProgram {
    pub(crate) headers: Vec<CHeader>,
    pub(crate) meta_widths: Vec<u8>,
    pub(crate) parser: Vec<CState>,
    pub(crate) start: u16,
    pub(crate) actions: Vec<CAction>,
    pub(crate) tables: Vec<CTable>,
    pub(crate) registers: Vec<CRegister>,
    pub(crate) externs: Vec<String>,
    pub(crate) apply: Vec<CInstr>,
    source: PipelineProgram,
}

impl CompiledProgram {
    pub fn source(&self) -> &PipelineProgram {
        &self.source
    }

    pub(crate) fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    pub(crate) fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.name == name)
    }

    pub(crate) fn register_index(&self, name: &str) -> Option<usize> {
        self.registers.iter().position(|r| r.name == name)
    }
}

pub(crate) fn mask(width: u8) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

fn bits_needed(v: u64) -> u8 {
    (64 - v.leading_zeros()).max(1) as u8
}

fn check_width(width: u8, location: &str) -> Result<(), ProgramError> {
    if width == 0 || width > 64 {
        return Err(err(location, ProgramErrorKind::BadWidth { width }));
    }
    Ok(())
}

fn err(location: &str, kind: ProgramErrorKind) -> ProgramError {
    ProgramError {
        location: location.to_string(),
        kind,
    }
}

fn unresolved(location: &str, what: &'static str, name: &str) -> ProgramError {
    err(
        location,
        ProgramErrorKind::Unresolved {
            what,
            name: name.to_string(),
        },
    )
}

fn index_names<'a, I>(
    names: I,
    what: &'static str,
    location: &str,
) -> Result<HashMap<&'a str, u16>, ProgramError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut map = HashMap::new();
    for (i, n) in names.into_iter().enumerate() {
        if map.insert(n, i as u16).is_some() {
            return Err(err(
                location,
                ProgramErrorKind::Duplicate {
                    what,
                    name: n.to_string(),
                },
            ));
        }
    }
    Ok(map)
}

struct Resolver<'p> {
    headers: HashMap<&'p str, u16>,
    header_fields: Vec<HashMap<&'p str, u16>>,
    header_widths: Vec<Vec<u8>>,
    meta: HashMap<&'p str, u16>,
    meta_widths: Vec<u8>,
    actions: HashMap<&'p str, u16>,
    action_params: Vec<Vec<u8>>,
    tables: HashMap<&'p str, u16>,
    registers: HashMap<&'p str, u16>,
    register_widths: Vec<u8>,
    externs: HashMap<&'p str, u16>,
}

/// Parameter context while lowering an action body.
struct Params<'a> {
    names: HashMap<&'a str, u16>,
    widths: &'a [u8],
}

impl<'p> Resolver<'p> {
    fn header(&self, name: &str, loc: &str) -> Result<u16, ProgramError> {
        self.headers
            .get(name)
            .copied()
            .ok_or_else(|| unresolved(loc, "header", name))
    }

    fn slot(&self, r: &FieldRef, loc: &str) -> Result<Slot, ProgramError> {
        if r.is_meta() {
            let index = *self
                .meta
                .get(r.field.as_str())
                .ok_or_else(|| unresolved(loc, "field", &r.to_string()))?;
            return Ok(Slot {
                scope: Scope::Meta,
                index,
                width: self.meta_widths[index as usize],
            });
        }
        let h = self.header(&r.header, loc)?;
        let index = *self.header_fields[h as usize]
            .get(r.field.as_str())
            .ok_or_else(|| unresolved(loc, "field", &r.to_string()))?;
        Ok(Slot {
            scope: Scope::Header(h),
            index,
            width: self.header_widths[h as usize][index as usize],
        })
    }

    /// Lower an expression and return it with its natural width: the widest
    /// field, parameter or constant that feeds it.
    fn expr(
        &self,
        e: &Expr,
        params: Option<&Params<'_>>,
        loc: &str,
    ) -> Result<(CExpr, u8), ProgramError> {
        let bin = |op, a: &Expr, b: &Expr| -> Result<(CExpr, u8), ProgramError> {
            let (ca, wa) = self.expr(a, params, loc)?;
            let (cb, wb) = self.expr(b, params, loc)?;
            let w = match op {
                BinOp::Div | BinOp::Shr => wa,
                _ => wa.max(wb),
            };
            Ok((CExpr::Bin(op, Box::new(ca), Box::new(cb)), w))
        };
        match e {
            Expr::Const(v) => Ok((CExpr::Const(*v), bits_needed(*v))),
            Expr::Field(r) => {
                let s = self.slot(r, loc)?;
                Ok((CExpr::Field(s), s.width))
            }
            Expr::Param(name) => {
                let p = params.ok_or_else(|| unresolved(loc, "action parameter", name))?;
                let i = *p
                    .names
                    .get(name.as_str())
                    .ok_or_else(|| unresolved(loc, "action parameter", name))?;
                Ok((CExpr::Param(i), p.widths[i as usize]))
            }
            Expr::Add(a, b) => bin(BinOp::Add, a, b),
            Expr::Sub(a, b) => bin(BinOp::Sub, a, b),
            Expr::Mul(a, b) => bin(BinOp::Mul, a, b),
            Expr::Div(a, b) => bin(BinOp::Div, a, b),
            Expr::And(a, b) => bin(BinOp::And, a, b),
            Expr::Or(a, b) => bin(BinOp::Or, a, b),
            Expr::Xor(a, b) => bin(BinOp::Xor, a, b),
            Expr::Shl(a, b) => bin(BinOp::Shl, a, b),
            Expr::Shr(a, b) => bin(BinOp::Shr, a, b),
        }
    }

    fn narrowing(
        dest_width: u8,
        value_width: u8,
        dest: &str,
        loc: &str,
    ) -> Result<(), ProgramError> {
        if value_width > dest_width {
            return Err(err(
                loc,
                ProgramErrorKind::WidthMismatch {
                    detail: format!(
                        "{value_width}-bit value assigned to {dest_width}-bit destination {dest}"
                    ),
                },
            ));
        }
        Ok(())
    }

    fn cond(
        &self,
        c: &Cond,
        params: Option<&Params<'_>>,
        loc: &str,
    ) -> Result<CCond, ProgramError> {
        let cmp = |op, a: &Expr, b: &Expr| -> Result<CCond, ProgramError> {
            Ok(CCond::Cmp(
                op,
                self.expr(a, params, loc)?.0,
                self.expr(b, params, loc)?.0,
            ))
        };
        match c {
            Cond::Eq(a, b) => cmp(CmpOp::Eq, a, b),
            Cond::Ne(a, b) => cmp(CmpOp::Ne, a, b),
            Cond::Lt(a, b) => cmp(CmpOp::Lt, a, b),
            Cond::Le(a, b) => cmp(CmpOp::Le, a, b),
            Cond::Gt(a, b) => cmp(CmpOp::Gt, a, b),
            Cond::Ge(a, b) => cmp(CmpOp::Ge, a, b),
            Cond::All(cs) => Ok(CCond::All(
                cs.iter()
                    .map(|c| self.cond(c, params, loc))
                    .collect::<Result<_, _>>()?,
            )),
            Cond::Any(cs) => Ok(CCond::Any(
                cs.iter()
                    .map(|c| self.cond(c, params, loc))
                    .collect::<Result<_, _>>()?,
            )),
            Cond::Not(c) => Ok(CCond::Not(Box::new(self.cond(c, params, loc)?))),
            Cond::Valid(h) => Ok(CCond::Valid(self.header(h, loc)?)),
        }
    }

    fn block(
        &self,
        body: &[Instruction],
        params: Option<&Params<'_>>,
        loc: &str,
    ) -> Result<Vec<CInstr>, ProgramError> {
        body.iter()
            .enumerate()
            .map(|(i, ins)| self.instr(ins, params, &format!("{loc}[{i}]")))
            .collect()
    }

    fn instr(
        &self,
        ins: &Instruction,
        params: Option<&Params<'_>>,
        loc: &str,
    ) -> Result<CInstr, ProgramError> {
        Ok(match ins {
            Instruction::Apply { table } => {
                if params.is_some() {
                    return Err(err(
                        loc,
                        ProgramErrorKind::ApplyInAction {
                            table: table.clone(),
                        },
                    ));
                }
                let t = *self
                    .tables
                    .get(table.as_str())
                    .ok_or_else(|| unresolved(loc, "table", table))?;
                CInstr::Apply(t)
            }
            Instruction::If {
                cond,
                then,
                otherwise,
            } => CInstr::If(
                self.cond(cond, params, loc)?,
                self.block(then, params, &format!("{loc}.then"))?,
                self.block(otherwise, params, &format!("{loc}.else"))?,
            ),
            Instruction::SetField { field, value } => {
                let dest = self.slot(field, loc)?;
                let (v, w) = self.expr(value, params, loc)?;
                Self::narrowing(dest.width, w, &field.to_string(), loc)?;
                CInstr::SetField(dest, v)
            }
            Instruction::RegRead {
                register,
                index,
                dest,
            } => {
                let r = self.register(register, loc)?;
                let d = self.slot(dest, loc)?;
                Self::narrowing(
                    d.width,
                    self.register_widths[r as usize],
                    &dest.to_string(),
                    loc,
                )?;
                CInstr::RegRead(r, self.expr(index, params, loc)?.0, d)
            }
            Instruction::RegWrite {
                register,
                index,
                value,
            } => {
                let r = self.register(register, loc)?;
                let (v, w) = self.expr(value, params, loc)?;
                Self::narrowing(self.register_widths[r as usize], w, register, loc)?;
                CInstr::RegWrite(r, self.expr(index, params, loc)?.0, v)
            }
            Instruction::AddHeader { header } => CInstr::AddHeader(self.header(header, loc)?),
            Instruction::RemoveHeader { header } => CInstr::RemoveHeader(self.header(header, loc)?),
            Instruction::Extern { name, args } => {
                let x = *self
                    .externs
                    .get(name.as_str())
                    .ok_or_else(|| unresolved(loc, "extern", name))?;
                CInstr::Extern(
                    x,
                    args.iter()
                        .map(|a| Ok(self.expr(a, params, loc)?.0))
                        .collect::<Result<_, ProgramError>>()?,
                )
            }
            Instruction::Forward { port } => {
                let (p, w) = self.expr(port, params, loc)?;
                Self::narrowing(16, w, "meta.egress_spec", loc)?;
                CInstr::Forward(p)
            }
            Instruction::Multicast { group } => {
                let (g, w) = self.expr(group, params, loc)?;
                Self::narrowing(16, w, "meta.mcast_grp", loc)?;
                CInstr::Multicast(g)
            }
            Instruction::Drop => CInstr::Drop,
        })
    }

    fn register(&self, name: &str, loc: &str) -> Result<u16, ProgramError> {
        self.registers
            .get(name)
            .copied()
            .ok_or_else(|| unresolved(loc, "register", name))
    }

    fn action_call(&self, call: &ActionCall, loc: &str) -> Result<(u16, Vec<u64>), ProgramError> {
        let a = *self
            .actions
            .get(call.action.as_str())
            .ok_or_else(|| unresolved(loc, "action", &call.action))?;
        let widths = &self.action_params[a as usize];
        if widths.len() != call.args.len() {
            return Err(err(
                loc,
                ProgramErrorKind::Arity {
                    action: call.action.clone(),
                    expected: widths.len(),
                    actual: call.args.len(),
                },
            ));
        }
        for (i, (&w, &v)) in widths.iter().zip(&call.args).enumerate() {
            if v & !mask(w) != 0 {
                return Err(err(
                    loc,
                    ProgramErrorKind::WidthMismatch {
                        detail: format!("argument {i} value {v} exceeds {w} bits"),
                    },
                ));
            }
        }
        Ok((a, call.args.clone()))
    }
}

/// Validate and lower a program.
pub fn compile(program: &PipelineProgram) -> Result<CompiledProgram, ProgramError> {
    // Headers.
    let headers = index_names(
        program.headers.iter().map(|h| h.name.as_str()),
        "header",
        "headers",
    )?;
    if headers.contains_key(META) {
        return Err(err(
            "headers",
            ProgramErrorKind::Duplicate {
                what: "header",
                name: META.to_string(),
            },
        ));
    }
    let mut header_fields = Vec::new();
    let mut header_widths = Vec::new();
    let mut cheaders = Vec::new();
    for h in &program.headers {
        let loc = format!("headers[{}]", h.name);
        header_fields.push(index_names(
            h.fields.iter().map(|f| f.name.as_str()),
            "field",
            &loc,
        )?);
        let mut bits = 0u32;
        for f in &h.fields {
            check_width(f.width, &format!("{loc}.{}", f.name))?;
            bits += f.width as u32;
        }
        if bits == 0 || bits % 8 != 0 {
            return Err(err(
                &loc,
                ProgramErrorKind::UnalignedHeader {
                    name: h.name.clone(),
                    bits,
                },
            ));
        }
        let widths: Vec<u8> = h.fields.iter().map(|f| f.width).collect();
        header_widths.push(widths.clone());
        cheaders.push(CHeader {
            name: h.name.clone(),
            widths,
            bytes: (bits / 8) as usize,
        });
    }

    // Metadata.
    let meta_names = STD_META
        .iter()
        .map(|(n, _)| *n)
        .chain(program.metadata.iter().map(|f| f.name.as_str()));
    let meta = index_names(meta_names, "metadata field", "metadata")?;
    let mut meta_widths: Vec<u8> = STD_META.iter().map(|(_, w)| *w).collect();
    for f in &program.metadata {
        check_width(f.width, &format!("metadata.{}", f.name))?;
        meta_widths.push(f.width);
    }

    // Actions, tables, registers, externs: names first so bodies can refer
    // to anything.
    let actions = index_names(
        program.actions.iter().map(|a| a.name.as_str()),
        "action",
        "actions",
    )?;
    let mut action_params = Vec::new();
    for a in &program.actions {
        let loc = format!("actions[{}].params", a.name);
        index_names(a.params.iter().map(|p| p.name.as_str()), "parameter", &loc)?;
        for p in &a.params {
            check_width(p.width, &format!("{loc}.{}", p.name))?;
        }
        action_params.push(a.params.iter().map(|p| p.width).collect::<Vec<_>>());
    }
    let tables = index_names(
        program.tables.iter().map(|t| t.name.as_str()),
        "table",
        "tables",
    )?;
    let registers = index_names(
        program.registers.iter().map(|r| r.name.as_str()),
        "register",
        "registers",
    )?;
    let mut register_widths = Vec::new();
    for r in &program.registers {
        let loc = format!("registers[{}]", r.name);
        check_width(r.width, &loc)?;
        if r.count == 0 {
            return Err(err(
                &loc,
                ProgramErrorKind::EmptyRegister {
                    name: r.name.clone(),
                },
            ));
        }
        register_widths.push(r.width);
    }
    let externs = index_names(
        program.externs.iter().map(String::as_str),
        "extern",
        "externs",
    )?;

    let res = Resolver {
        headers,
        header_fields,
        header_widths,
        meta,
        meta_widths: meta_widths.clone(),
        actions,
        action_params,
        tables,
        registers,
        register_widths,
        externs,
    };

    // Parser.
    let states = index_names(
        program.parser.iter().map(|s| s.name.as_str()),
        "parser state",
        "parser",
    )?;
    for reserved in [PARSER_ACCEPT, PARSER_REJECT] {
        if states.contains_key(reserved) {
            return Err(err(
                "parser",
                ProgramErrorKind::Duplicate {
                    what: "parser state",
                    name: reserved.to_string(),
                },
            ));
        }
    }
    let start = *states
        .get(PARSER_START)
        .ok_or_else(|| err("parser", ProgramErrorKind::NoStartState))?;
    let target = |name: &str, loc: &str| -> Result<Target, ProgramError> {
        match name {
            PARSER_ACCEPT => Ok(Target::Accept),
            PARSER_REJECT => Ok(Target::Reject),
            n => states
                .get(n)
                .map(|&i| Target::State(i))
                .ok_or_else(|| unresolved(loc, "parser state", n)),
        }
    };
    let mut parser = Vec::new();
    for s in &program.parser {
        let loc = format!("parser[{}]", s.name);
        let extract = s
            .extract
            .iter()
            .map(|h| res.header(h, &loc))
            .collect::<Result<Vec<_>, _>>()?;
        let transition = match &s.transition {
            Transition::Accept => CTransition::Go(Target::Accept),
            Transition::Reject => CTransition::Go(Target::Reject),
            Transition::Goto(n) => CTransition::Go(target(n, &loc)?),
            Transition::Select {
                field,
                cases,
                default,
            } => {
                let slot = res.slot(field, &loc)?;
                let mut seen = HashMap::new();
                let mut out = Vec::new();
                for c in cases {
                    if c.value & !mask(slot.width) != 0 {
                        return Err(err(
                            &loc,
                            ProgramErrorKind::WidthMismatch {
                                detail: format!(
                                    "select value {} exceeds {}-bit {field}",
                                    c.value, slot.width
                                ),
                            },
                        ));
                    }
                    if seen.insert(c.value, ()).is_some() {
                        return Err(err(
                            &loc,
                            ProgramErrorKind::Duplicate {
                                what: "select case",
                                name: c.value.to_string(),
                            },
                        ));
                    }
                    out.push((c.value, target(&c.next, &loc)?));
                }
                CTransition::Select {
                    slot,
                    cases: out,
                    default: target(default, &loc)?,
                }
            }
        };
        parser.push(CState {
            extract,
            transition,
        });
    }
    check_parser_acyclic(&parser, &program.parser)?;

    // Action bodies.
    let mut cactions = Vec::new();
    for a in &program.actions {
        let widths: Vec<u8> = a.params.iter().map(|p| p.width).collect();
        let params = Params {
            names: a
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| (p.name.as_str(), i as u16))
                .collect(),
            widths: &widths,
        };
        let body = res.block(&a.body, Some(&params), &format!("actions[{}].body", a.name))?;
        cactions.push(CAction {
            name: a.name.clone(),
            params: widths.clone(),
            body,
        });
    }

    // Tables.
    let mut ctables = Vec::new();
    for t in &program.tables {
        let loc = format!("tables[{}]", t.name);
        let keys = t
            .keys
            .iter()
            .map(|k| res.slot(k, &loc))
            .collect::<Result<Vec<_>, _>>()?;
        let permitted = t
            .actions
            .iter()
            .map(|a| {
                res.actions
                    .get(a.as_str())
                    .copied()
                    .ok_or_else(|| unresolved(&loc, "action", a))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let default = res.action_call(&t.default_action, &format!("{loc}.default_action"))?;
        if !permitted.contains(&default.0) {
            return Err(err(
                &format!("{loc}.default_action"),
                ProgramErrorKind::ActionNotPermitted {
                    table: t.name.clone(),
                    action: t.default_action.action.clone(),
                },
            ));
        }
        ctables.push(CTable {
            name: t.name.clone(),
            keys,
            actions: permitted,
            default,
        });
    }

    let apply = res.block(&program.apply, None, "apply")?;

    Ok(CompiledProgram {
        headers: cheaders,
        meta_widths,
        parser,
        start,
        actions: cactions,
        tables: ctables,
        registers: program
            .registers
            .iter()
            .map(|r| CRegister {
                name: r.name.clone(),
                width: r.width,
                count: r.count,
            })
            .collect(),
        externs: program.externs.clone(),
        apply,
        source: program.clone(),
    })
}

fn check_parser_acyclic(parser: &[CState], src: &[ParserState]) -> Result<(), ProgramError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    fn successors(s: &CState) -> Vec<u16> {
        let mut out = Vec::new();
        let mut push = |t: &Target| {
            if let Target::State(i) = t {
                out.push(*i);
            }
        };
        match &s.transition {
            CTransition::Go(t) => push(t),
            CTransition::Select { cases, default, .. } => {
                cases.iter().for_each(|(_, t)| push(t));
                push(default);
            }
        }
        out
    }
    fn visit(
        i: u16,
        parser: &[CState],
        marks: &mut [Mark],
        src: &[ParserState],
    ) -> Result<(), ProgramError> {
        match marks[i as usize] {
            Mark::Done => return Ok(()),
            Mark::Active => {
                return Err(err(
                    "parser",
                    ProgramErrorKind::ParserCycle {
                        state: src[i as usize].name.clone(),
                    },
                ))
            }
            Mark::New => {}
        }
        marks[i as usize] = Mark::Active;
        for n in successors(&parser[i as usize]) {
            visit(n, parser, marks, src)?;
        }
        marks[i as usize] = Mark::Done;
        Ok(())
    }
    let mut marks = vec![Mark::New; parser.len()];
    for i in 0..parser.len() {
        visit(i as u16, parser, &mut marks, src)?;
    }
    Ok(())
}
