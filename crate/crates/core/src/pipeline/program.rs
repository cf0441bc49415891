// SPDX-License-Identifier: Apache-2.0

//! Program document model. This is the loadable, serializable form of a
//! pipeline program; [`super::compile`] validates it and resolves names
//! into indices before a device runs it.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reference to a header field (`"gen.cycle"`) or metadata field
/// (`"meta.ingress_port"`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FieldRef {
    pub header: String,
    pub field: String,
}

impl FieldRef {
    pub fn new(header: &str, field: &str) -> Self {
        FieldRef {
            header: header.to_string(),
            field: field.to_string(),
        }
    }

    pub fn is_meta(&self) -> bool {
        self.header == META
    }
}

/// Scope name for metadata fields.
pub const META: &str = "meta";

impl fmt::Display for FieldRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.header, self.field)
    }
}

impl From<FieldRef> for String {
    fn from(r: FieldRef) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for FieldRef {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        match s.split_once('.') {
            Some((h, f)) if !h.is_empty() && !f.is_empty() && !f.contains('.') => {
                Ok(FieldRef::new(h, f))
            }
            _ => Err(format!(
                "malformed field reference `{s}`, expected `header.field`"
            )),
        }
    }
}

impl std::str::FromStr for FieldRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        FieldRef::try_from(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    /// Width in bits, 1..=64.
    pub width: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeaderSpec {
    pub name: String,
    pub fields: Vec<FieldSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectCase {
    pub value: u64,
    pub next: String,
}

/// Parser state transition. `"accept"` and `"reject"` are reserved target
/// names usable wherever a state name is expected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Transition {
    Accept,
    Reject,
    Goto(String),
    Select {
        field: FieldRef,
        cases: Vec<SelectCase>,
        default: String,
    },
}

pub const PARSER_START: &str = "start";
pub const PARSER_ACCEPT: &str = "accept";
pub const PARSER_REJECT: &str = "reject";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParserState {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extract: Vec<String>,
    pub transition: Transition,
}

/// Unsigned integer expression. Arithmetic wraps modulo the width of the
/// destination it is assigned to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Expr {
    Const(u64),
    Field(FieldRef),
    /// Action parameter; only valid inside an action body.
    Param(String),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Xor(Box<Expr>, Box<Expr>),
    Shl(Box<Expr>, Box<Expr>),
    Shr(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn field(r: &str) -> Expr {
        Expr::Field(r.parse().expect("static field reference"))
    }

    pub fn param(name: &str) -> Expr {
        Expr::Param(name.to_string())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Add(Box::new(a), Box::new(b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn div(a: Expr, b: Expr) -> Expr {
        Expr::Div(Box::new(a), Box::new(b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Cond {
    Eq(Expr, Expr),
    Ne(Expr, Expr),
    Lt(Expr, Expr),
    Le(Expr, Expr),
    Gt(Expr, Expr),
    Ge(Expr, Expr),
    All(Vec<Cond>),
    Any(Vec<Cond>),
    Not(Box<Cond>),
    Valid(String),
}

impl Cond {
    pub fn eq(a: Expr, b: Expr) -> Cond {
        Cond::Eq(a, b)
    }

    pub fn valid(header: &str) -> Cond {
        Cond::Valid(header.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Instruction {
    Apply {
        table: String,
    },
    If {
        cond: Cond,
        then: Vec<Instruction>,
        #[serde(default, rename = "else", skip_serializing_if = "Vec::is_empty")]
        otherwise: Vec<Instruction>,
    },
    SetField {
        field: FieldRef,
        value: Expr,
    },
    RegRead {
        register: String,
        index: Expr,
        dest: FieldRef,
    },
    RegWrite {
        register: String,
        index: Expr,
        value: Expr,
    },
    AddHeader {
        header: String,
    },
    RemoveHeader {
        header: String,
    },
    Extern {
        name: String,
        args: Vec<Expr>,
    },
    Forward {
        port: Expr,
    },
    Multicast {
        group: Expr,
    },
    Drop,
}

impl Instruction {
    pub fn apply(table: &str) -> Self {
        Instruction::Apply {
            table: table.to_string(),
        }
    }

    pub fn set(field: &str, value: Expr) -> Self {
        Instruction::SetField {
            field: field.parse().expect("static field reference"),
            value,
        }
    }

    pub fn reg_read(register: &str, index: Expr, dest: &str) -> Self {
        Instruction::RegRead {
            register: register.to_string(),
            index,
            dest: dest.parse().expect("static field reference"),
        }
    }

    pub fn reg_write(register: &str, index: Expr, value: Expr) -> Self {
        Instruction::RegWrite {
            register: register.to_string(),
            index,
            value,
        }
    }

    pub fn if_else(cond: Cond, then: Vec<Instruction>, otherwise: Vec<Instruction>) -> Self {
        Instruction::If {
            cond,
            then,
            otherwise,
        }
    }

    pub fn add_header(header: &str) -> Self {
        Instruction::AddHeader {
            header: header.to_string(),
        }
    }

    pub fn remove_header(header: &str) -> Self {
        Instruction::RemoveHeader {
            header: header.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpec {
    pub name: String,
    #[serde(default)]
    pub params: Vec<FieldSpec>,
    #[serde(default)]
    pub body: Vec<Instruction>,
}

/// An action name with bound parameter values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionCall {
    pub action: String,
    #[serde(default)]
    pub args: Vec<u64>,
}

impl ActionCall {
    pub fn new(action: &str, args: &[u64]) -> Self {
        ActionCall {
            action: action.to_string(),
            args: args.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub name: String,
    pub keys: Vec<FieldRef>,
    pub actions: Vec<String>,
    pub default_action: ActionCall,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterSpec {
    pub name: String,
    /// Cell width in bits, 1..=64.
    pub width: u8,
    pub count: u32,
}

/// A complete loadable device program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineProgram {
    pub headers: Vec<HeaderSpec>,
    /// User metadata fields, in addition to the standard ones.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metadata: Vec<FieldSpec>,
    pub parser: Vec<ParserState>,
    pub actions: Vec<ActionSpec>,
    pub tables: Vec<TableSpec>,
    pub registers: Vec<RegisterSpec>,
    pub externs: Vec<String>,
    pub apply: Vec<Instruction>,
}

#[derive(Debug, Error)]
#[error("program document error at line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl PipelineProgram {
    /// Parse a JSON program document.
    pub fn from_json(text: &str) -> Result<Self, ParseError> {
        serde_json::from_str(text).map_err(|e| ParseError {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serialization is infallible")
    }
}
