//! Discrete-event engine.
//!
//! The engine owns a virtual clock with 1 µs resolution and a priority queue
//! of pending events. Events with equal time are dispatched in insertion order
//! (the per-event sequence number breaks ties), which makes every run a pure
//! function of its inputs and seed.
//!
//! Randomness is split into named streams (see [`RngStreams`]) so that a new
//! stochastic consumer never perturbs the draws seen by existing ones.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Simulation time in microseconds since the start of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    /// Rounds to the nearest microsecond. Negative input saturates at zero.
    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e6).round().max(0.0) as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, us: u64) -> SimTime {
        SimTime(self.0 + us)
    }
}

impl AddAssign<u64> for SimTime {
    fn add_assign(&mut self, us: u64) {
        self.0 += us;
    }
}

impl Sub for SimTime {
    type Output = u64;

    /// Elapsed microseconds. Panics (debug) if `other` is later than `self`.
    fn sub(self, other: SimTime) -> u64 {
        self.0 - other.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled in the past: at {at}, clock is {now}")]
    ScheduledInPast { at: SimTime, now: SimTime },
    #[error("run_until target {target} is before the clock {now}")]
    TargetInPast { target: SimTime, now: SimTime },
}

/// Opaque handle returned by [`Engine::schedule`], used for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

/// A dequeued event.
#[derive(Debug, Clone, PartialEq)]
pub struct Event<K> {
    pub time: SimTime,
    pub sequence: u64,
    pub kind: K,
}

struct Pending<K> {
    time: SimTime,
    sequence: u64,
    kind: K,
}

impl<K> PartialEq for Pending<K> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.sequence == other.sequence
    }
}

impl<K> Eq for Pending<K> {}

impl<K> PartialOrd for Pending<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<K> Ord for Pending<K> {
    // BinaryHeap is a max-heap; invert so the earliest (time, sequence) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.sequence).cmp(&(self.time, self.sequence))
    }
}

/// Event queue plus clock.
pub struct Engine<K> {
    now: SimTime,
    next_sequence: u64,
    queue: BinaryHeap<Pending<K>>,
    cancelled: HashSet<u64>,
    dispatched: u64,
}

impl<K> Default for Engine<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K> Engine<K> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_sequence: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
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

    /// Number of live (not cancelled) pending events.
    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, time: SimTime, kind: K) -> Result<EventHandle, SimError> {
        if time < self.now {
            return Err(SimError::ScheduledInPast { at: time, now: self.now });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(Pending { time, sequence, kind });
        Ok(EventHandle(sequence))
    }

    /// Schedules `delay_us` after the current clock.
    pub fn schedule_in(&mut self, delay_us: u64, kind: K) -> EventHandle {
        let at = self.now + delay_us;
        // cannot be in the past
        self.schedule(at, kind).expect("relative schedule")
    }

    /// Cancels a pending event. Returns false if the handle already fired or
    /// was cancelled before.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_sequence {
            return false;
        }
        let live = self.queue.iter().any(|p| p.sequence == handle.0);
        live && self.cancelled.insert(handle.0)
    }

    /// Removes the next event with `time <= limit`, advancing the clock to it.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<Event<K>> {
        loop {
            let head = self.queue.peek()?;
            if head.time > limit {
                return None;
            }
            let p = self.queue.pop().expect("peeked");
            if self.cancelled.remove(&p.sequence) {
                continue;
            }
            debug_assert!(p.time >= self.now);
            self.now = p.time;
            self.dispatched += 1;
            return Some(Event { time: p.time, sequence: p.sequence, kind: p.kind });
        }
    }

    /// Dispatches every event with `time <= target` through `handler`, then
    /// sets the clock to `target`. The handler may schedule further events.
    pub fn run_until<F>(&mut self, target: SimTime, mut handler: F) -> Result<u64, SimError>
    where
        F: FnMut(&mut Self, Event<K>),
    {
        if target < self.now {
            return Err(SimError::TargetInPast { target, now: self.now });
        }
        let mut count = 0;
        while let Some(ev) = self.pop_until(target) {
            handler(self, ev);
            count += 1;
        }
        self.now = target;
        Ok(count)
    }
}

/// Well-known stream labels.
pub mod streams {
    pub const CHANNEL: &str = "channel";
    pub const SHADOWING: &str = "shadowing";
    pub const TRAFFIC: &str = "traffic";
    pub const INTERFERENCE: &str = "interference";
    pub const USER: &str = "user";
}

/// FNV-1a, used to turn stream labels into ChaCha stream ids. Stable across
/// platforms and compiler versions, unlike `DefaultHasher`.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Factory for independent, reproducible random streams keyed by
/// `(seed, label)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stable_hash(label.as_bytes()));
        rng
    }

    /// Stream for a keyed, order-independent draw (e.g. one shadowing sample
    /// per link, channel and coherence interval).
    pub fn keyed(&self, label: &str, key: &[u64]) -> ChaCha8Rng {
        let mut bytes = label.as_bytes().to_vec();
        for k in key {
            bytes.extend_from_slice(&k.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stable_hash(&bytes));
        rng
    }
}
