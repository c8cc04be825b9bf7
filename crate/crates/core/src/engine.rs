//! Discrete-event kernel: virtual clock, event queue, seeded randomness and
//! wall-clock pacing.
//!
//! Events are ordered by `(fire_time, sequence)`; the sequence is an insertion
//! counter so that events scheduled for the same instant fire in FIFO order.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Virtual time, in seconds.
pub type SimTime = f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("cannot schedule event at t={at} s: clock is already at t={now} s")]
    InThePast { at: SimTime, now: SimTime },
    #[error("invalid fire time {0}")]
    InvalidTime(SimTime),
    #[error("run_until({t_end}) called but the clock is already at t={now} s")]
    PastEnd { t_end: SimTime, now: SimTime },
}

/// Handle returned by [`Scheduler::schedule`], usable to cancel the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn sequence(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct SimEvent<E> {
    pub fire_time: SimTime,
    pub sequence: u64,
    pub payload: E,
}

impl<E> PartialEq for SimEvent<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for SimEvent<E> {}

impl<E> PartialOrd for SimEvent<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for SimEvent<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_time
            .total_cmp(&self.fire_time)
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}

/// Event queue plus the virtual clock it drives.
#[derive(Debug)]
pub struct Scheduler<E> {
    now: SimTime,
    next_sequence: u64,
    queue: BinaryHeap<SimEvent<E>>,
    cancelled: HashSet<u64>,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Self {
            now: 0.0,
            next_sequence: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, fire_time: SimTime, payload: E) -> Result<EventHandle, EngineError> {
        if !fire_time.is_finite() {
            return Err(EngineError::InvalidTime(fire_time));
        }
        if fire_time < self.now {
            return Err(EngineError::InThePast {
                at: fire_time,
                now: self.now,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(SimEvent {
            fire_time,
            sequence,
            payload,
        });
        Ok(EventHandle(sequence))
    }

    /// Schedules `delay` seconds from now.
    pub fn schedule_in(&mut self, delay: SimTime, payload: E) -> Result<EventHandle, EngineError> {
        self.schedule(self.now + delay, payload)
    }

    /// Returns true if the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_sequence {
            return false;
        }
        if !self.queue.iter().any(|e| e.sequence == handle.0) {
            return false;
        }
        self.cancelled.insert(handle.0)
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    /// Fire time of the next live event.
    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.discard_cancelled_head();
        self.queue.peek().map(|e| e.fire_time)
    }

    /// Pops the next event if it fires no later than `t_end`, advancing the clock.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<SimEvent<E>> {
        self.discard_cancelled_head();
        if self.queue.peek()?.fire_time > t_end {
            return None;
        }
        let ev = self.queue.pop()?;
        self.now = ev.fire_time;
        Some(ev)
    }

    /// Moves the clock forward without firing anything. Never moves it back.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Processes every event with `fire_time <= t_end` through `handler`, then
    /// sets the clock to `t_end`.
    pub fn run_until<F, H>(&mut self, t_end: SimTime, mut handler: F) -> Result<RunLog, H>
    where
        F: FnMut(&mut Self, SimEvent<E>) -> Result<(), H>,
        H: From<EngineError>,
    {
        if t_end < self.now {
            return Err(EngineError::PastEnd {
                t_end,
                now: self.now,
            }
            .into());
        }
        let mut log = RunLog::default();
        while let Some(ev) = self.pop_until(t_end) {
            log.push(ev.fire_time, ev.sequence);
            handler(self, ev)?;
        }
        self.advance_to(t_end);
        Ok(log)
    }

    fn discard_cancelled_head(&mut self) {
        while let Some(head) = self.queue.peek() {
            if self.cancelled.remove(&head.sequence) {
                self.queue.pop();
            } else {
                break;
            }
        }
    }
}

/// Ordered record of dispatched events.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub entries: Vec<(SimTime, u64)>,
}

impl RunLog {
    pub fn push(&mut self, time: SimTime, sequence: u64) {
        self.entries.push((time, sequence));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Deterministic uniform stream for one stochastic consumer.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent stream for `label` from a scenario seed. Adding
    /// a new label never perturbs the draws of existing ones.
    pub fn substream(seed: u64, label: &str) -> Self {
        Self::new(splitmix64(seed ^ fnv1a64(label.as_bytes())))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Next value in `[0, 1)`.
    pub fn draw_uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockState {
    Running,
    Paused,
}

/// Maps virtual time onto wall-clock time.
///
/// `pace` is the number of virtual seconds per wall second; 0 disables pacing.
#[derive(Debug, Clone)]
pub struct Pacer {
    pace: f64,
    state: ClockState,
    wall_anchor: Instant,
    virt_anchor: SimTime,
}

impl Pacer {
    pub fn new(pace: f64) -> Self {
        Self {
            pace: pace.max(0.0),
            state: ClockState::Running,
            wall_anchor: Instant::now(),
            virt_anchor: 0.0,
        }
    }

    pub fn pace(&self) -> f64 {
        self.pace
    }

    pub fn state(&self) -> ClockState {
        self.state
    }

    pub fn is_paused(&self) -> bool {
        self.state == ClockState::Paused
    }

    pub fn pause(&mut self) {
        self.state = ClockState::Paused;
    }

    pub fn resume(&mut self, now: SimTime) {
        self.state = ClockState::Running;
        self.rebase(now);
    }

    pub fn set_pace(&mut self, pace: f64, now: SimTime) {
        self.pace = pace.max(0.0);
        self.rebase(now);
    }

    pub fn rebase(&mut self, now: SimTime) {
        self.wall_anchor = Instant::now();
        self.virt_anchor = now;
    }

    /// How long to wait before virtual time `t` may be dispatched. `None` when
    /// it is already due (or pacing is off).
    pub fn wait_for(&self, t: SimTime) -> Option<Duration> {
        if self.pace <= 0.0 {
            return None;
        }
        let offset = ((t - self.virt_anchor) / self.pace).max(0.0);
        let due = self.wall_anchor + Duration::from_secs_f64(offset);
        due.checked_duration_since(Instant::now())
            .filter(|d| !d.is_zero())
    }
}
