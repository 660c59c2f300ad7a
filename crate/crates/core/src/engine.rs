//! Deterministic event queue.
//!
//! Events are ordered by `(time, sequence)`. The sequence number is a
//! per-queue counter assigned at scheduling time, so events scheduled for the
//! same instant are dispatched in the order they were scheduled and two runs
//! with identical inputs dispatch identically.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::SimError;
use crate::time::SimTime;

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub time: SimTime,
    pub sequence: u64,
    pub payload: P,
}

impl<P> PartialEq for Event<P> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.sequence == other.sequence
    }
}

impl<P> Eq for Event<P> {}

impl<P> PartialOrd for Event<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Event<P> {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .cmp(&self.time)
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}

#[derive(Debug)]
pub struct EventQueue<P> {
    heap: BinaryHeap<Event<P>>,
    next_sequence: u64,
    now: SimTime,
    dispatched: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_sequence: 0,
            now: SimTime::ZERO,
            dispatched: 0,
        }
    }

    /// Current simulated time: the timestamp of the last dispatched event.
    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Enqueue `payload` for dispatch at `time`. Returns the assigned sequence
    /// number. Scheduling before the current time is a causality bug.
    pub fn schedule(&mut self, time: SimTime, payload: P) -> Result<u64, SimError> {
        if time < self.now {
            return Err(SimError::ScheduledInPast { now: self.now, at: time });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.heap.push(Event { time, sequence, payload });
        Ok(sequence)
    }

    /// Remove the earliest event and advance the clock to its time.
    pub fn pop(&mut self) -> Option<Event<P>> {
        let ev = self.heap.pop()?;
        debug_assert!(ev.time >= self.now);
        self.now = ev.time;
        self.dispatched += 1;
        Some(ev)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event<P>> {
        self.heap.iter()
    }
}
