// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event kernel.
//!
//! Events are ordered by `(at, seq)` where `seq` is a per-engine insertion
//! counter, so two events scheduled for the same instant are dispatched in
//! the order they were scheduled.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in integer nanoseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn ns(self) -> u64 {
        self.0
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: u64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

impl Sub for SimTime {
    type Output = u64;

    fn sub(self, rhs: SimTime) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Identifier of a simulated device (node pipeline, midpoint pipeline, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub u16);

/// Handle returned by [`Engine::schedule`], usable for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventId(u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("cannot schedule at {at} while now is {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
}

/// A dispatched event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event<P> {
    pub at: SimTime,
    pub seq: u64,
    pub target: DeviceId,
    pub payload: P,
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.seq == other.0.seq
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // Reversed: BinaryHeap is a max-heap, we want the smallest (at, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.at, other.0.seq).cmp(&(self.0.at, self.0.seq))
    }
}

/// Single-threaded event queue and clock.
pub struct Engine<P> {
    queue: BinaryHeap<Queued<P>>,
    cancelled: HashSet<u64>,
    now: SimTime,
    next_seq: u64,
    dispatched: u64,
}

impl<P> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Engine<P> {
    pub fn new() -> Self {
        Engine {
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            dispatched: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Total events dispatched since construction.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Number of live (not cancelled) events still queued.
    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn is_idle(&self) -> bool {
        self.pending() == 0
    }

    pub fn schedule(
        &mut self,
        at: SimTime,
        target: DeviceId,
        payload: P,
    ) -> Result<EventId, EngineError> {
        if at < self.now {
            return Err(EngineError::SchedulingInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued(Event {
            at,
            seq,
            target,
            payload,
        }));
        Ok(EventId(seq))
    }

    /// Schedule `delay` nanoseconds after now.
    pub fn schedule_in(&mut self, delay: u64, target: DeviceId, payload: P) -> EventId {
        let at = self.now + delay;
        self.schedule(at, target, payload)
            .expect("a non-negative delay is never in the past")
    }

    /// Cancel a queued event. Returns false if it was already dispatched or
    /// cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        if id.0 >= self.next_seq || self.cancelled.contains(&id.0) {
            return false;
        }
        if !self.queue.iter().any(|q| q.0.seq == id.0) {
            return false;
        }
        self.cancelled.insert(id.0)
    }

    /// Pop the next live event with `at <= until`, advancing the clock.
    pub fn next_event(&mut self, until: SimTime) -> Option<Event<P>> {
        loop {
            let head = self.queue.peek()?;
            if head.0.at > until {
                return None;
            }
            let Queued(ev) = self.queue.pop().expect("peeked");
            if self.cancelled.remove(&ev.seq) {
                continue;
            }
            self.now = ev.at;
            self.dispatched += 1;
            return Some(ev);
        }
    }

    /// Dispatch every event with `at <= until` in `(at, seq)` order.
    ///
    /// The handler may schedule further events; those are dispatched in the
    /// same call if they fall within `until`. When nothing is dispatched the
    /// clock advances to `until` (never backwards); otherwise it rests on the
    /// last dispatched timestamp.
    pub fn run<F>(&mut self, until: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, Event<P>),
    {
        let mut count = 0;
        while let Some(ev) = self.next_event(until) {
            count += 1;
            handler(self, ev);
        }
        if count == 0 && until > self.now {
            self.now = until;
        }
        count
    }
}
