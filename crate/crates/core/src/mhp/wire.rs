// SPDX-License-Identifier: Apache-2.0

//! Bit-exact MHP control messages. All integers are big-endian and the
//! first byte is always the message type.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MSG_TIMER: u8 = 0x01;
pub const MSG_GEN: u8 = 0x02;
pub const MSG_MP_REPLY: u8 = 0x03;
pub const MSG_DETECTOR: u8 = 0x04;

pub const TIMER_LEN: usize = 5;
pub const GEN_LEN: usize = 9;
pub const DETECTOR_LEN: usize = 8;
pub const MP_REPLY_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReplyOutcome {
    Fail = 0,
    Success = 1,
    Error = 2,
}

impl ReplyOutcome {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ReplyOutcome::Fail),
            1 => Some(ReplyOutcome::Success),
            2 => Some(ReplyOutcome::Error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MpReply {
    pub outcome: ReplyOutcome,
    pub cycle: u32,
    /// Zero unless `outcome` is `Success`.
    pub pair_seq: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WireMessage {
    Timer {
        cycle: u32,
    },
    Gen {
        cycle: u32,
        qubit_slot: u16,
        attempt_params: u16,
    },
    Detector {
        outcome: u8,
        det_id: u16,
        bin: u32,
    },
    MpReply(MpReply),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("empty frame")]
    Empty,
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("truncated frame: type {msg_type:#04x} needs {expected} bytes, got {actual}")]
    Truncated {
        msg_type: u8,
        expected: usize,
        actual: usize,
    },
    #[error("bad length: type {msg_type:#04x} is {expected} bytes, got {actual}")]
    BadLength {
        msg_type: u8,
        expected: usize,
        actual: usize,
    },
    #[error("invalid reply outcome {0}")]
    BadOutcome(u8),
    #[error("reply with outcome {outcome:?} carries pair_seq {pair_seq}")]
    StrayPairSeq {
        outcome: ReplyOutcome,
        pair_seq: u32,
    },
}

impl WireMessage {
    pub fn msg_type(&self) -> u8 {
        match self {
            WireMessage::Timer { .. } => MSG_TIMER,
            WireMessage::Gen { .. } => MSG_GEN,
            WireMessage::Detector { .. } => MSG_DETECTOR,
            WireMessage::MpReply(_) => MSG_MP_REPLY,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MP_REPLY_LEN);
        out.push(self.msg_type());
        match *self {
            WireMessage::Timer { cycle } => out.extend_from_slice(&cycle.to_be_bytes()),
            WireMessage::Gen {
                cycle,
                qubit_slot,
                attempt_params,
            } => {
                out.extend_from_slice(&cycle.to_be_bytes());
                out.extend_from_slice(&qubit_slot.to_be_bytes());
                out.extend_from_slice(&attempt_params.to_be_bytes());
            }
            WireMessage::Detector {
                outcome,
                det_id,
                bin,
            } => {
                out.push(outcome);
                out.extend_from_slice(&det_id.to_be_bytes());
                out.extend_from_slice(&bin.to_be_bytes());
            }
            WireMessage::MpReply(r) => {
                out.push(r.outcome as u8);
                out.extend_from_slice(&r.cycle.to_be_bytes());
                out.extend_from_slice(&r.pair_seq.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<WireMessage, DecodeError> {
        let &msg_type = bytes.first().ok_or(DecodeError::Empty)?;
        let expected = match msg_type {
            MSG_TIMER => TIMER_LEN,
            MSG_GEN => GEN_LEN,
            MSG_MP_REPLY => MP_REPLY_LEN,
            MSG_DETECTOR => DETECTOR_LEN,
            other => return Err(DecodeError::UnknownType(other)),
        };
        if bytes.len() < expected {
            return Err(DecodeError::Truncated {
                msg_type,
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(DecodeError::BadLength {
                msg_type,
                expected,
                actual: bytes.len(),
            });
        }
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let u32_at =
            |i: usize| u32::from_be_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        Ok(match msg_type {
            MSG_TIMER => WireMessage::Timer { cycle: u32_at(1) },
            MSG_GEN => WireMessage::Gen {
                cycle: u32_at(1),
                qubit_slot: u16_at(5),
                attempt_params: u16_at(7),
            },
            MSG_DETECTOR => WireMessage::Detector {
                outcome: bytes[1],
                det_id: u16_at(2),
                bin: u32_at(4),
            },
            _ => {
                let outcome =
                    ReplyOutcome::from_byte(bytes[1]).ok_or(DecodeError::BadOutcome(bytes[1]))?;
                let pair_seq = u32_at(6);
                if outcome != ReplyOutcome::Success && pair_seq != 0 {
                    return Err(DecodeError::StrayPairSeq { outcome, pair_seq });
                }
                WireMessage::MpReply(MpReply {
                    outcome,
                    cycle: u32_at(2),
                    pair_seq,
                })
            }
        })
    }
}

/// Decode a frame that must be an `MP_REPLY`.
pub fn decode_reply(bytes: &[u8]) -> Result<MpReply, DecodeError> {
    match WireMessage::decode(bytes)? {
        WireMessage::MpReply(r) => Ok(r),
        other => Err(DecodeError::UnknownType(other.msg_type())),
    }
}
