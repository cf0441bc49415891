// SPDX-License-Identifier: Apache-2.0

//! Minimal match-action pipeline: program documents, static validation and
//! a packet-at-a-time device interpreter with exact-match tables,
//! registers, externs and multicast groups.

mod compile;
mod device;
mod program;

pub use compile::{
    compile, CompiledProgram, ProgramError, ProgramErrorKind, EGRESS_NONE, STD_META,
};
pub use device::{
    Device, DeviceStats, Disposition, ExternHandler, GroupError, NoExterns, Packet,
    RecordingExterns, RegisterError, TableError, Trap, DEFAULT_PROCESSING_DELAY_NS,
};
pub use program::*;
