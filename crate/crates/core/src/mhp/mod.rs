// SPDX-License-Identifier: Apache-2.0

//! Midpoint Heralding Protocol: wire formats, time bins and the two device
//! programs.

mod programs;
pub mod wire;

use serde::{Deserialize, Serialize};

pub use programs::*;
pub use wire::{decode_reply, DecodeError, MpReply, ReplyOutcome, WireMessage};

/// Index of a fixed-width arrival-time window, anchored at t = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BinIndex(pub u64);

/// `floor(t / bin_width_ns)`. Panics if the width is zero.
pub fn bin_of(t_ns: u64, bin_width_ns: u64) -> BinIndex {
    assert!(bin_width_ns > 0, "bin width must be positive");
    BinIndex(t_ns / bin_width_ns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bin_examples() {
        assert_eq!(bin_of(1500, 1000), BinIndex(1));
        assert_eq!(bin_of(0, 7), BinIndex(0));
    }

    proptest! {
        #[test]
        fn bin_boundary(k in 1u64..10_000, w in 1u64..1_000_000) {
            // Oracle: repeated subtraction over the exact boundary value.
            let t = k * w - 1;
            let mut q = 0u64;
            let mut r = t;
            while r >= w { r -= w; q += 1; }
            prop_assert_eq!(bin_of(t, w), BinIndex(q));
            prop_assert_eq!(q, k - 1);
            prop_assert_eq!(bin_of(k * w, w), BinIndex(k));
        }
    }
}
