//! Deterministic discrete-event engine.
//!
//! Time is integral virtual milliseconds. Events are ordered by `(time,
//! sequence)` where `sequence` is a monotone counter assigned at scheduling,
//! so two events at the same instant dispatch in the order they were
//! scheduled. The engine is generic over the event payload; the cluster
//! simulation lives in [`crate::sim`].

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Virtual milliseconds since simulation start.
pub type Millis = u64;

/// Monotone virtual clock. Only the engine advances it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now: Millis,
}

impl SimClock {
    pub fn now(&self) -> Millis {
        self.now
    }

    fn advance_to(&mut self, t: Millis) {
        debug_assert!(t >= self.now, "clock moved backwards: {} -> {}", self.now, t);
        self.now = t;
    }
}

/// An event scheduled for dispatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduled<E> {
    pub time: Millis,
    pub sequence: u64,
    pub event: E,
}

struct HeapEntry<E>(Scheduled<E>);

impl<E> PartialEq for HeapEntry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.0.time == other.0.time && self.0.sequence == other.0.sequence
    }
}

impl<E> Eq for HeapEntry<E> {}

impl<E> PartialOrd for HeapEntry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for HeapEntry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first.
        other.0.time.cmp(&self.0.time).then_with(|| other.0.sequence.cmp(&self.0.sequence))
    }
}

/// Scheduling an event before the current clock. This is a programming
/// error in a handler, not a recoverable condition.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot schedule {kind} at t={requested}ms: clock is already at t={now}ms")]
pub struct ScheduleInPast {
    pub kind: String,
    pub requested: Millis,
    pub now: Millis,
}

/// Event queue plus clock.
pub struct Engine<E> {
    clock: SimClock,
    heap: BinaryHeap<HeapEntry<E>>,
    next_sequence: u64,
    dispatched: u64,
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Self { clock: SimClock::default(), heap: BinaryHeap::new(), next_sequence: 0, dispatched: 0 }
    }

    pub fn now(&self) -> Millis {
        self.clock.now()
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }

    /// Number of events dispatched so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Time of the next queued event, if any.
    pub fn peek_time(&self) -> Option<Millis> {
        self.heap.peek().map(|e| e.0.time)
    }
}

impl<E: fmt::Debug> Engine<E> {
    /// Enqueue `event` at `time`. Fails if `time` is before the clock.
    pub fn try_schedule(&mut self, time: Millis, event: E) -> Result<u64, ScheduleInPast> {
        if time < self.clock.now() {
            return Err(ScheduleInPast { kind: format!("{event:?}"), requested: time, now: self.clock.now() });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.heap.push(HeapEntry(Scheduled { time, sequence, event }));
        Ok(sequence)
    }

    /// Enqueue `event` at `time`, panicking on a past timestamp.
    pub fn schedule(&mut self, time: Millis, event: E) -> u64 {
        match self.try_schedule(time, event) {
            Ok(seq) => seq,
            Err(e) => panic!("{e}"),
        }
    }

    /// Pop the next event with `time <= end`, advancing the clock to it.
    pub fn pop_until(&mut self, end: Millis) -> Option<Scheduled<E>> {
        match self.heap.peek() {
            Some(head) if head.0.time <= end => {
                let HeapEntry(next) = self.heap.pop().expect("peeked");
                self.clock.advance_to(next.time);
                self.dispatched += 1;
                Some(next)
            }
            _ => None,
        }
    }

    /// Move the clock forward to `t` without dispatching anything.
    pub fn advance_to(&mut self, t: Millis) {
        if t > self.clock.now() {
            self.clock.advance_to(t);
        }
    }

    /// Dispatch every event with `time <= end` through `handler`, then set
    /// the clock to `end`. Handlers may schedule follow-up events; those
    /// within the horizon are dispatched in the same call.
    pub fn run_until<F>(&mut self, end: Millis, mut handler: F)
    where
        F: FnMut(&mut Self, Scheduled<E>),
    {
        while let Some(ev) = self.pop_until(end) {
            handler(self, ev);
        }
        self.advance_to(end);
    }
}

/// Named random sub-streams derived from one run seed.
///
/// Each consumer gets its own ChaCha stream, so adding draws to one
/// consumer never shifts another consumer's sequence.
#[derive(Debug, Clone, Copy)]
pub struct RngStreams {
    seed: u64,
}

/// Stream identifiers. Values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Predictor = 1,
    TraceSynthesis = 2,
    Rescale = 3,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_time_dispatches_before_later() {
        let mut e: Engine<&str> = Engine::new();
        e.schedule(1, "later");
        e.schedule(0, "now");
        let mut seen = vec![];
        e.run_until(10, |_, ev| seen.push(ev.event));
        assert_eq!(seen, vec!["now", "later"]);
    }

    #[test]
    fn ties_break_by_schedule_order() {
        let mut e: Engine<char> = Engine::new();
        e.schedule(500, 'A');
        e.schedule(500, 'B');
        let mut seen = vec![];
        e.run_until(1000, |_, ev| seen.push(ev.event));
        assert_eq!(seen, vec!['A', 'B']);
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut e: Engine<&str> = Engine::new();
        e.run_until(100, |_, _| {});
        let err = e.try_schedule(99, "late").unwrap_err();
        assert_eq!(err.requested, 99);
        assert_eq!(err.now, 100);
        assert!(err.to_string().contains("late"));
    }

    #[test]
    #[should_panic(expected = "cannot schedule")]
    fn schedule_panics_on_past() {
        let mut e: Engine<u8> = Engine::new();
        e.run_until(5, |_, _| {});
        e.schedule(4, 0);
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut e: Engine<u8> = Engine::new();
        let mut n = 0;
        e.run_until(1000, |_, _| n += 1);
        assert_eq!(e.now(), 1000);
        assert_eq!(n, 0);
    }

    #[test]
    fn partial_horizon() {
        let mut e: Engine<u8> = Engine::new();
        for t in [10, 20, 30] {
            e.schedule(t, 0);
        }
        let mut n = 0;
        e.run_until(25, |_, _| n += 1);
        assert_eq!(n, 2);
        assert_eq!(e.now(), 25);
        assert_eq!(e.pending(), 1);
    }

    #[test]
    fn cascade_within_horizon() {
        // root at 10 spawns a child at 15 which spawns a grandchild at 40;
        // the grandchild lies beyond the horizon of 30.
        let mut e: Engine<u32> = Engine::new();
        e.schedule(10, 0);
        let mut seen = vec![];
        e.run_until(30, |eng, ev| {
            seen.push((ev.time, ev.event));
            match ev.event {
                0 => {
                    eng.schedule(15, 1);
                }
                1 => {
                    eng.schedule(40, 2);
                }
                _ => {}
            }
        });
        assert_eq!(seen, vec![(10, 0), (15, 1)]);
        assert_eq!(e.now(), 30);
        assert_eq!(e.peek_time(), Some(40));
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let s = RngStreams::new(7);
        let draw = |stream| {
            let mut r = s.stream(stream);
            (0..4).map(|_| r.random::<u64>()).collect::<Vec<_>>()
        };
        let (a, b, c) = (draw(Stream::Predictor), draw(Stream::Predictor), draw(Stream::TraceSynthesis));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dispatch_order_is_time_then_sequence(times in proptest::collection::vec(0u64..50, 1..60)) {
                let mut e: Engine<usize> = Engine::new();
                for (i, t) in times.iter().enumerate() {
                    e.schedule(*t, i);
                }
                let mut out: Vec<(u64, u64)> = vec![];
                let mut last = 0;
                e.run_until(100, |eng, ev| {
                    assert!(eng.now() >= last);
                    last = eng.now();
                    out.push((ev.time, ev.sequence));
                });
                let mut sorted = out.clone();
                sorted.sort();
                prop_assert_eq!(out, sorted);
            }
        }
    }
}
