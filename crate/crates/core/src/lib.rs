// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event simulator of a heralded quantum link whose
//! classical control traffic is processed by programmable match-action
//! pipelines.

pub mod cli;
pub mod config;
pub mod engine;
pub mod harness;
pub mod mhp;
pub mod phys;
pub mod pipeline;
