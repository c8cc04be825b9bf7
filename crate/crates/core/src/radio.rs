//! Simulated software-defined radio links.
//!
//! A [`Waveform`] is one direction of a radio interface: a FIFO byte-bounded
//! queue drained at `raw_capacity × code_rate`, with a uniform loss draw per
//! departing packet. A [`RadioInterface`] pairs the downlink (MEC to UE) and
//! uplink waveforms of one FDD interface under a label such as `HR` or `LR`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RandomSource, SimTime};

pub const DEFAULT_CORRECTION_THRESHOLD: f64 = 0.10;
pub const DEFAULT_QUEUE_BYTES: u64 = 64 * 1024;
pub const DEFAULT_PROPAGATION_DELAY: SimTime = 0.001;
/// How far back per-packet records are kept for windowed KPIs.
pub const HISTORY_RETENTION: SimTime = 120.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadioError {
    #[error("unknown waveform `{0}`")]
    UnknownWaveform(String),
    #[error("unsupported code rate `{0}` (expected 1, 1/2 or 1/3)")]
    UnsupportedRate(String),
    #[error("packet error probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("invalid waveform configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowId(pub String);

impl FlowId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Switch port identifier; doubles as the address carried in packet headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PortId(pub u32);

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Rewritable addressing fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Headers {
    pub flow: FlowId,
    pub src: PortId,
    pub dst: PortId,
    /// Switch traversals so far.
    pub hops: u8,
    /// Set by chain elements (e.g. 1 once transcoded).
    pub stage: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Media,
    SmsRequest { seq: u64 },
    SmsResponse { seq: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub headers: Headers,
    pub size: u32,
    pub created_at: SimTime,
    pub payload: Payload,
}

impl Packet {
    pub fn bits(&self) -> f64 {
        f64::from(self.size) * 8.0
    }

    pub fn flow(&self) -> &FlowId {
        &self.headers.flow
    }
}

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum CodeRate {
    #[default]
    #[serde(rename = "1")]
    One,
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "1/3")]
    Third,
}

impl CodeRate {
    pub const ALL: [CodeRate; 3] = [CodeRate::One, CodeRate::Half, CodeRate::Third];

    pub fn denominator(self) -> u32 {
        match self {
            CodeRate::One => 1,
            CodeRate::Half => 2,
            CodeRate::Third => 3,
        }
    }

    pub fn as_f64(self) -> f64 {
        1.0 / f64::from(self.denominator())
    }

    /// Next more protective (lower) rate, if any.
    pub fn lower(self) -> Option<CodeRate> {
        match self {
            CodeRate::One => Some(CodeRate::Half),
            CodeRate::Half => Some(CodeRate::Third),
            CodeRate::Third => None,
        }
    }

    /// Residual packet error probability left after decoding.
    pub fn residual_per(self, channel_per: f64, correction_threshold: f64) -> f64 {
        match self {
            CodeRate::One => channel_per,
            _ if channel_per <= correction_threshold => 0.0,
            _ => (channel_per - correction_threshold).clamp(0.0, 1.0),
        }
    }
}

impl fmt::Display for CodeRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodeRate::One => f.write_str("1"),
            other => write!(f, "1/{}", other.denominator()),
        }
    }
}

impl FromStr for CodeRate {
    type Err = RadioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "1" | "1/1" => Ok(CodeRate::One),
            "1/2" => Ok(CodeRate::Half),
            "1/3" => Ok(CodeRate::Third),
            other => Err(RadioError::UnsupportedRate(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// MEC host towards the UE.
    Down,
    Up,
}

impl Direction {
    pub fn suffix(self) -> &'static str {
        match self {
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformConfig {
    pub label: String,
    /// bits/s
    pub raw_capacity: f64,
    #[serde(default)]
    pub code_rate: CodeRate,
    #[serde(default = "default_threshold")]
    pub correction_threshold: f64,
    #[serde(default = "default_queue_bytes")]
    pub queue_bytes: u64,
    #[serde(default)]
    pub channel_per: f64,
    #[serde(default = "default_propagation")]
    pub propagation_delay: SimTime,
}

fn default_threshold() -> f64 {
    DEFAULT_CORRECTION_THRESHOLD
}
fn default_queue_bytes() -> u64 {
    DEFAULT_QUEUE_BYTES
}
fn default_propagation() -> SimTime {
    DEFAULT_PROPAGATION_DELAY
}

impl WaveformConfig {
    pub fn new(label: impl Into<String>, raw_capacity: f64) -> Self {
        Self {
            label: label.into(),
            raw_capacity,
            code_rate: CodeRate::One,
            correction_threshold: DEFAULT_CORRECTION_THRESHOLD,
            queue_bytes: DEFAULT_QUEUE_BYTES,
            channel_per: 0.0,
            propagation_delay: DEFAULT_PROPAGATION_DELAY,
        }
    }

    pub fn validate(&self) -> Result<(), RadioError> {
        if !(self.raw_capacity.is_finite() && self.raw_capacity > 0.0) {
            return Err(RadioError::InvalidConfig(format!(
                "{}: raw capacity must be positive",
                self.label
            )));
        }
        check_probability(self.channel_per)?;
        check_probability(self.correction_threshold)?;
        if self.queue_bytes == 0 {
            return Err(RadioError::InvalidConfig(format!(
                "{}: queue capacity must be positive",
                self.label
            )));
        }
        if !(self.propagation_delay.is_finite() && self.propagation_delay >= 0.0) {
            return Err(RadioError::InvalidConfig(format!(
                "{}: propagation delay must be non-negative",
                self.label
            )));
        }
        Ok(())
    }
}

fn check_probability(p: f64) -> Result<(), RadioError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(RadioError::InvalidProbability(p))
    }
}

/// Per-flow packet counters of one waveform.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowCounters {
    pub offered: u64,
    pub delivered: u64,
    pub dropped_queue_full: u64,
    pub dropped_channel: u64,
    pub in_queue: u64,
}

impl FlowCounters {
    pub fn is_conserved(&self) -> bool {
        self.offered
            == self.delivered + self.dropped_queue_full + self.dropped_channel + self.in_queue
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnqueueOutcome {
    /// `departure` is set when the link was idle and the packet went straight
    /// into service; the caller schedules a departure event at that time.
    Accepted {
        departure: Option<SimTime>,
    },
    DroppedQueueFull,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DepartureOutcome {
    Delivered { arrives_at: SimTime },
    LostChannel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Departure {
    pub packet: Packet,
    pub outcome: DepartureOutcome,
    /// Departure time of the next packet now in service.
    pub next_departure: Option<SimTime>,
}

/// Channel state sampled over a trailing window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioKpis {
    pub window: SimTime,
    /// Serialized bits over the capacity available in the window.
    pub load: f64,
    /// Arriving bits (including queue drops) over the same denominator.
    pub offered_load: f64,
    pub offered_bps: f64,
    pub delivered_bps: f64,
    pub residual_per: f64,
    /// No packet left the waveform in the window; `residual_per` is meaningless.
    pub insufficient_samples: bool,
    pub queue_bytes: u64,
    pub effective_capacity: f64,
}

/// Packet outcomes of one flow in a window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowWindow {
    pub transmitted: u64,
    pub lost: u64,
    pub queue_dropped: u64,
}

impl FlowWindow {
    pub fn attempts(&self) -> u64 {
        self.transmitted + self.queue_dropped
    }

    pub fn delivered(&self) -> u64 {
        self.transmitted - self.lost
    }

    /// Delivered over attempted; `None` without attempts.
    pub fn success_rate(&self) -> Option<f64> {
        let attempts = self.attempts();
        (attempts > 0).then(|| self.delivered() as f64 / attempts as f64)
    }
}

#[derive(Debug, Clone)]
struct TxRecord {
    time: SimTime,
    flow: FlowId,
    bits: f64,
    lost: bool,
}

#[derive(Debug, Clone)]
struct ArrivalRecord {
    time: SimTime,
    flow: FlowId,
    bits: f64,
    dropped: bool,
}

#[derive(Debug, Clone)]
struct InService {
    packet: Packet,
    finish: SimTime,
}

#[derive(Debug, Clone)]
pub struct Waveform {
    name: String,
    raw_capacity: f64,
    code_rate: CodeRate,
    channel_per: f64,
    correction_threshold: f64,
    queue_capacity: u64,
    propagation_delay: SimTime,
    queue: VecDeque<Packet>,
    queue_bytes: u64,
    in_service: Option<InService>,
    rng: RandomSource,
    flows: BTreeMap<FlowId, FlowCounters>,
    tx_log: VecDeque<TxRecord>,
    arrival_log: VecDeque<ArrivalRecord>,
    capacity_history: Vec<(SimTime, f64)>,
}

impl Waveform {
    pub fn new(name: impl Into<String>, config: &WaveformConfig, rng: RandomSource) -> Self {
        let effective = config.raw_capacity * config.code_rate.as_f64();
        Self {
            name: name.into(),
            raw_capacity: config.raw_capacity,
            code_rate: config.code_rate,
            channel_per: config.channel_per,
            correction_threshold: config.correction_threshold,
            queue_capacity: config.queue_bytes,
            propagation_delay: config.propagation_delay,
            queue: VecDeque::new(),
            queue_bytes: 0,
            in_service: None,
            rng,
            flows: BTreeMap::new(),
            tx_log: VecDeque::new(),
            arrival_log: VecDeque::new(),
            capacity_history: vec![(0.0, effective)],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn raw_capacity(&self) -> f64 {
        self.raw_capacity
    }

    pub fn code_rate(&self) -> CodeRate {
        self.code_rate
    }

    pub fn effective_capacity(&self) -> f64 {
        self.raw_capacity * self.code_rate.as_f64()
    }

    pub fn channel_per(&self) -> f64 {
        self.channel_per
    }

    pub fn correction_threshold(&self) -> f64 {
        self.correction_threshold
    }

    pub fn residual_per(&self) -> f64 {
        self.code_rate
            .residual_per(self.channel_per, self.correction_threshold)
    }

    pub fn queue_capacity(&self) -> u64 {
        self.queue_capacity
    }

    /// Bytes buffered, including the packet being serialized.
    pub fn queue_bytes(&self) -> u64 {
        self.queue_bytes
    }

    pub fn propagation_delay(&self) -> SimTime {
        self.propagation_delay
    }

    pub fn is_busy(&self) -> bool {
        self.in_service.is_some()
    }

    pub fn next_departure(&self) -> Option<SimTime> {
        self.in_service.as_ref().map(|s| s.finish)
    }

    pub fn flow_counters(&self) -> &BTreeMap<FlowId, FlowCounters> {
        &self.flows
    }

    pub fn totals(&self) -> FlowCounters {
        self.flows
            .values()
            .fold(FlowCounters::default(), |acc, c| FlowCounters {
                offered: acc.offered + c.offered,
                delivered: acc.delivered + c.delivered,
                dropped_queue_full: acc.dropped_queue_full + c.dropped_queue_full,
                dropped_channel: acc.dropped_channel + c.dropped_channel,
                in_queue: acc.in_queue + c.in_queue,
            })
    }

    fn serialization_time(&self, packet: &Packet) -> SimTime {
        packet.bits() / self.effective_capacity()
    }

    pub fn enqueue(&mut self, now: SimTime, packet: Packet) -> EnqueueOutcome {
        let bits = packet.bits();
        let counters = self.flows.entry(packet.flow().clone()).or_default();
        counters.offered += 1;
        if self.queue_bytes + u64::from(packet.size) > self.queue_capacity {
            counters.dropped_queue_full += 1;
            self.arrival_log.push_back(ArrivalRecord {
                time: now,
                flow: packet.flow().clone(),
                bits,
                dropped: true,
            });
            return EnqueueOutcome::DroppedQueueFull;
        }
        counters.in_queue += 1;
        self.queue_bytes += u64::from(packet.size);
        self.arrival_log.push_back(ArrivalRecord {
            time: now,
            flow: packet.flow().clone(),
            bits,
            dropped: false,
        });
        if self.in_service.is_none() {
            let finish = now + self.serialization_time(&packet);
            self.in_service = Some(InService { packet, finish });
            EnqueueOutcome::Accepted {
                departure: Some(finish),
            }
        } else {
            self.queue.push_back(packet);
            EnqueueOutcome::Accepted { departure: None }
        }
    }

    /// Finishes serializing the packet in service. Returns `None` if idle.
    pub fn complete_departure(&mut self, now: SimTime) -> Option<Departure> {
        let InService { packet, .. } = self.in_service.take()?;
        let residual = self.residual_per();
        let lost = self.rng.draw_uniform() < residual;
        self.queue_bytes -= u64::from(packet.size);
        let counters = self.flows.entry(packet.flow().clone()).or_default();
        counters.in_queue -= 1;
        if lost {
            counters.dropped_channel += 1;
        } else {
            counters.delivered += 1;
        }
        self.tx_log.push_back(TxRecord {
            time: now,
            flow: packet.flow().clone(),
            bits: packet.bits(),
            lost,
        });
        let next_departure = self.queue.pop_front().map(|next| {
            let finish = now + self.serialization_time(&next);
            self.in_service = Some(InService {
                packet: next,
                finish,
            });
            finish
        });
        let outcome = if lost {
            DepartureOutcome::LostChannel
        } else {
            DepartureOutcome::Delivered {
                arrives_at: now + self.propagation_delay,
            }
        };
        Some(Departure {
            packet,
            outcome,
            next_departure,
        })
    }

    /// Changes the code rate. If a packet is being serialized, its remaining
    /// bits are re-timed at the new rate and the new finish time returned.
    pub fn set_code_rate(&mut self, now: SimTime, rate: CodeRate) -> Option<SimTime> {
        let old_effective = self.effective_capacity();
        self.code_rate = rate;
        let new_effective = self.effective_capacity();
        self.capacity_history.push((now, new_effective));
        let service = self.in_service.as_mut()?;
        let remaining_bits = (service.finish - now).max(0.0) * old_effective;
        service.finish = now + remaining_bits / new_effective;
        Some(service.finish)
    }

    pub fn inject_channel_error(&mut self, mean_per: f64) -> Result<(), RadioError> {
        check_probability(mean_per)?;
        self.channel_per = mean_per;
        Ok(())
    }

    /// Bit-seconds of capacity available over `[from, to]`.
    fn capacity_integral(&self, from: SimTime, to: SimTime) -> f64 {
        let mut total = 0.0;
        for (i, &(start, capacity)) in self.capacity_history.iter().enumerate() {
            let end = self
                .capacity_history
                .get(i + 1)
                .map_or(f64::INFINITY, |&(t, _)| t);
            let lo = start.max(from);
            let hi = end.min(to);
            if hi > lo {
                total += capacity * (hi - lo);
            }
        }
        total
    }

    pub fn sample_kpis(&self, now: SimTime, window: SimTime) -> RadioKpis {
        assert!(window > 0.0, "KPI window must be positive");
        let from = (now - window).max(0.0);
        let span = (now - from).max(f64::MIN_POSITIVE);
        let (mut tx_bits, mut delivered_bits, mut tx_packets, mut lost_packets) =
            (0.0, 0.0, 0u64, 0u64);
        for r in self.tx_log.iter().rev().take_while(|r| r.time > from) {
            tx_bits += r.bits;
            tx_packets += 1;
            if r.lost {
                lost_packets += 1;
            } else {
                delivered_bits += r.bits;
            }
        }
        let offered_bits: f64 = self
            .arrival_log
            .iter()
            .rev()
            .take_while(|r| r.time > from)
            .map(|r| r.bits)
            .sum();
        let capacity = self.capacity_integral(from, now);
        let ratio = |bits: f64| if capacity > 0.0 { bits / capacity } else { 0.0 };
        RadioKpis {
            window,
            load: ratio(tx_bits),
            offered_load: ratio(offered_bits),
            offered_bps: offered_bits / span,
            delivered_bps: delivered_bits / span,
            residual_per: if tx_packets > 0 {
                lost_packets as f64 / tx_packets as f64
            } else {
                0.0
            },
            insufficient_samples: tx_packets == 0,
            queue_bytes: self.queue_bytes,
            effective_capacity: self.effective_capacity(),
        }
    }

    /// Outcomes of `flow` on this waveform over `(now - window, now]`.
    pub fn flow_window(&self, now: SimTime, window: SimTime, flow: &FlowId) -> FlowWindow {
        let from = now - window;
        let mut w = FlowWindow::default();
        for r in self.tx_log.iter().rev().take_while(|r| r.time > from) {
            if &r.flow == flow {
                w.transmitted += 1;
                if r.lost {
                    w.lost += 1;
                }
            }
        }
        w.queue_dropped = self
            .arrival_log
            .iter()
            .rev()
            .take_while(|r| r.time > from)
            .filter(|r| r.dropped && &r.flow == flow)
            .count() as u64;
        w
    }

    /// Lost/transmitted over `(from, to]`, or `None` if nothing left the link.
    pub fn measured_per_between(&self, from: SimTime, to: SimTime) -> Option<(u64, u64)> {
        let (mut lost, mut sent) = (0, 0);
        for r in self.tx_log.iter().filter(|r| r.time > from && r.time <= to) {
            sent += 1;
            if r.lost {
                lost += 1;
            }
        }
        (sent > 0).then_some((lost, sent))
    }

    /// Drops per-packet history older than the retention horizon.
    pub fn prune(&mut self, now: SimTime) {
        let horizon = now - HISTORY_RETENTION;
        while self.tx_log.front().is_some_and(|r| r.time < horizon) {
            self.tx_log.pop_front();
        }
        while self.arrival_log.front().is_some_and(|r| r.time < horizon) {
            self.arrival_log.pop_front();
        }
    }
}

/// One FDD interface: independent downlink and uplink waveforms.
#[derive(Debug, Clone)]
pub struct RadioInterface {
    pub config: WaveformConfig,
    pub down: Waveform,
    pub up: Waveform,
}

impl RadioInterface {
    pub fn new(config: WaveformConfig, seed: u64) -> Result<Self, RadioError> {
        config.validate()?;
        let name = |dir: Direction| format!("{}.{}", config.label, dir.suffix());
        let down = Waveform::new(
            name(Direction::Down),
            &config,
            RandomSource::substream(seed, &name(Direction::Down)),
        );
        let up = Waveform::new(
            name(Direction::Up),
            &config,
            RandomSource::substream(seed, &name(Direction::Up)),
        );
        Ok(Self { config, down, up })
    }

    pub fn label(&self) -> &str {
        &self.config.label
    }

    pub fn waveform(&self, dir: Direction) -> &Waveform {
        match dir {
            Direction::Down => &self.down,
            Direction::Up => &self.up,
        }
    }

    pub fn waveform_mut(&mut self, dir: Direction) -> &mut Waveform {
        match dir {
            Direction::Down => &mut self.down,
            Direction::Up => &mut self.up,
        }
    }

    pub fn code_rate(&self) -> CodeRate {
        self.down.code_rate()
    }

    pub fn effective_capacity(&self) -> f64 {
        self.down.effective_capacity()
    }
}

/// The SDR controller's view: all interfaces, addressed by label.
#[derive(Debug, Clone, Default)]
pub struct Radio {
    interfaces: Vec<RadioInterface>,
}

impl Radio {
    pub fn new(configs: &[WaveformConfig], seed: u64) -> Result<Self, RadioError> {
        let mut interfaces = Vec::with_capacity(configs.len());
        for config in configs {
            if interfaces
                .iter()
                .any(|i: &RadioInterface| i.label() == config.label)
            {
                return Err(RadioError::InvalidConfig(format!(
                    "duplicate waveform label `{}`",
                    config.label
                )));
            }
            interfaces.push(RadioInterface::new(config.clone(), seed)?);
        }
        Ok(Self { interfaces })
    }

    pub fn interfaces(&self) -> &[RadioInterface] {
        &self.interfaces
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.interfaces.iter().map(|i| i.label())
    }

    pub fn get(&self, label: &str) -> Result<&RadioInterface, RadioError> {
        self.interfaces
            .iter()
            .find(|i| i.label() == label)
            .ok_or_else(|| RadioError::UnknownWaveform(label.to_string()))
    }

    pub fn get_mut(&mut self, label: &str) -> Result<&mut RadioInterface, RadioError> {
        self.interfaces
            .iter_mut()
            .find(|i| i.label() == label)
            .ok_or_else(|| RadioError::UnknownWaveform(label.to_string()))
    }

    pub fn waveform(&self, label: &str, dir: Direction) -> Result<&Waveform, RadioError> {
        Ok(self.get(label)?.waveform(dir))
    }

    pub fn waveform_mut(
        &mut self,
        label: &str,
        dir: Direction,
    ) -> Result<&mut Waveform, RadioError> {
        Ok(self.get_mut(label)?.waveform_mut(dir))
    }

    /// Applies to both directions; returns rescheduled departures.
    pub fn set_code_rate(
        &mut self,
        now: SimTime,
        label: &str,
        rate: CodeRate,
    ) -> Result<Vec<(Direction, SimTime)>, RadioError> {
        let iface = self.get_mut(label)?;
        iface.config.code_rate = rate;
        let mut rescheduled = Vec::new();
        for dir in [Direction::Down, Direction::Up] {
            if let Some(t) = iface.waveform_mut(dir).set_code_rate(now, rate) {
                rescheduled.push((dir, t));
            }
        }
        Ok(rescheduled)
    }

    pub fn inject_channel_error(&mut self, label: &str, mean_per: f64) -> Result<(), RadioError> {
        check_probability(mean_per)?;
        let iface = self.get_mut(label)?;
        iface.config.channel_per = mean_per;
        iface.down.inject_channel_error(mean_per)?;
        iface.up.inject_channel_error(mean_per)
    }

    pub fn prune(&mut self, now: SimTime) {
        for iface in &mut self.interfaces {
            iface.down.prune(now);
            iface.up.prune(now);
        }
    }
}
