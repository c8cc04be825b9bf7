//! Edge applications and the App Manager.
//!
//! Applications never touch the event queue: the manager hands back the
//! packets to inject and the times at which it wants to be called again, and
//! the node turns those into events.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::radio::{FlowId, Headers, Packet, Payload, PortId};

pub const DEFAULT_INSTANTIATION_LATENCY: SimTime = 0.5;
pub const DEFAULT_SMS_SIZE: u32 = 100;
pub const DEFAULT_SMS_INTERVAL: SimTime = 1.0;
pub const DEFAULT_SMS_TIMEOUT: SimTime = 2.0;
pub const DEFAULT_VIDEO_PACKET: u32 = 1200;
pub const DEFAULT_PROCESSING_DELAY: SimTime = 0.020;
const LOG_RETENTION: SimTime = 120.0;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AppId(pub String);

impl AppId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AppId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AppError {
    #[error("unknown application `{0}`")]
    UnknownApp(AppId),
    #[error("application `{0}` already exists")]
    DuplicateApp(AppId),
    #[error("application `{0}` is not running")]
    NotRunning(AppId),
    #[error("invalid spec for `{app}`: {reason}")]
    InvalidSpec { app: AppId, reason: String },
    #[error("`{app}` needs peer `{peer}`, which is not running")]
    MissingPeer { app: AppId, peer: AppId },
    #[error("operation not supported by `{app}` ({kind})")]
    WrongKind { app: AppId, kind: &'static str },
    #[error("bitrate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("`{app}` got a packet of unexpected flow `{flow}`")]
    UnexpectedFlow { app: AppId, flow: FlowId },
}

/// Which side of the radio links an application runs on.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    #[default]
    Mec,
    Ue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmsParams {
    #[serde(default = "default_sms_size")]
    pub request_size: u32,
    #[serde(default = "default_sms_size")]
    pub response_size: u32,
    #[serde(default = "default_sms_interval")]
    pub interval: SimTime,
    #[serde(default = "default_sms_timeout")]
    pub timeout: SimTime,
}

fn default_sms_size() -> u32 {
    DEFAULT_SMS_SIZE
}
fn default_sms_interval() -> SimTime {
    DEFAULT_SMS_INTERVAL
}
fn default_sms_timeout() -> SimTime {
    DEFAULT_SMS_TIMEOUT
}
fn default_video_packet() -> u32 {
    DEFAULT_VIDEO_PACKET
}
fn default_processing_delay() -> SimTime {
    DEFAULT_PROCESSING_DELAY
}

impl Default for SmsParams {
    fn default() -> Self {
        Self {
            request_size: DEFAULT_SMS_SIZE,
            response_size: DEFAULT_SMS_SIZE,
            interval: DEFAULT_SMS_INTERVAL,
            timeout: DEFAULT_SMS_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AppSpec {
    SmsServer {
        flow: FlowId,
        #[serde(flatten)]
        params: SmsParams,
    },
    SmsClient {
        flow: FlowId,
        server: AppId,
        #[serde(flatten)]
        params: SmsParams,
    },
    VideoServer {
        flow: FlowId,
        bitrate: f64,
        #[serde(default = "default_video_packet")]
        packet_size: u32,
    },
    Transcoder {
        input_flow: FlowId,
        target_bitrate: f64,
        #[serde(default = "default_processing_delay")]
        processing_delay: SimTime,
        #[serde(default = "default_video_packet")]
        packet_size: u32,
    },
}

impl AppSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            AppSpec::SmsServer { .. } => "sms_server",
            AppSpec::SmsClient { .. } => "sms_client",
            AppSpec::VideoServer { .. } => "video_server",
            AppSpec::Transcoder { .. } => "transcoder",
        }
    }

    /// Flow this app emits (for a transcoder, the flow it re-emits).
    pub fn flow(&self) -> &FlowId {
        match self {
            AppSpec::SmsServer { flow, .. }
            | AppSpec::SmsClient { flow, .. }
            | AppSpec::VideoServer { flow, .. } => flow,
            AppSpec::Transcoder { input_flow, .. } => input_flow,
        }
    }

    fn validate(&self, id: &AppId) -> Result<(), AppError> {
        let invalid = |reason: &str| AppError::InvalidSpec {
            app: id.clone(),
            reason: reason.to_string(),
        };
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match self {
            AppSpec::SmsServer { params, .. } | AppSpec::SmsClient { params, .. } => {
                if params.request_size == 0 || params.response_size == 0 {
                    return Err(invalid("message sizes must be positive"));
                }
                if !positive(params.interval) || !positive(params.timeout) {
                    return Err(invalid("interval and timeout must be positive"));
                }
            }
            AppSpec::VideoServer {
                bitrate,
                packet_size,
                ..
            } => {
                if !positive(*bitrate) {
                    return Err(invalid("bitrate must be positive"));
                }
                if *packet_size == 0 {
                    return Err(invalid("packet size must be positive"));
                }
            }
            AppSpec::Transcoder {
                target_bitrate,
                processing_delay,
                packet_size,
                ..
            } => {
                if !positive(*target_bitrate) {
                    return Err(invalid("target bitrate must be positive"));
                }
                if !(processing_delay.is_finite() && *processing_delay >= 0.0) {
                    return Err(invalid("processing delay must be non-negative"));
                }
                if *packet_size == 0 {
                    return Err(invalid("packet size must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppState {
    Running,
    Stopped,
}

/// Counters and sample logs of one application.
#[derive(Debug, Clone, Default, Serialize)]
pub struct AppKpis {
    pub emitted_packets: u64,
    pub emitted_bits: f64,
    pub received_packets: u64,
    pub received_bits: f64,
    pub sms_attempts: u64,
    pub sms_successes: u64,
    pub sms_timeouts: u64,
    pub foreign_drops: u64,
    #[serde(skip)]
    rtt_log: VecDeque<(SimTime, SimTime)>,
    #[serde(skip)]
    outcome_log: VecDeque<(SimTime, bool)>,
    #[serde(skip)]
    emission_log: VecDeque<(SimTime, f64)>,
}

impl AppKpis {
    /// RTT samples as `(arrival time, rtt)`.
    pub fn rtt_samples(&self) -> impl Iterator<Item = (SimTime, SimTime)> + '_ {
        self.rtt_log.iter().copied()
    }

    pub fn rtt_max(&self, now: SimTime, window: SimTime) -> Option<SimTime> {
        self.rtt_log
            .iter()
            .rev()
            .take_while(|(t, _)| *t > now - window)
            .map(|(_, rtt)| *rtt)
            .reduce(f64::max)
    }

    pub fn rtt_mean(&self, now: SimTime, window: SimTime) -> Option<SimTime> {
        let samples: Vec<_> = self
            .rtt_log
            .iter()
            .rev()
            .take_while(|(t, _)| *t > now - window)
            .map(|(_, rtt)| *rtt)
            .collect();
        (!samples.is_empty()).then(|| samples.iter().sum::<f64>() / samples.len() as f64)
    }

    /// Successes over resolved rounds (responses plus timeouts) in the window.
    pub fn success_rate(&self, now: SimTime, window: SimTime) -> Option<f64> {
        let (ok, total) = self
            .outcome_log
            .iter()
            .rev()
            .take_while(|(t, _)| *t > now - window)
            .fold((0u64, 0u64), |(ok, n), (_, success)| {
                (ok + u64::from(*success), n + 1)
            });
        (total > 0).then(|| ok as f64 / total as f64)
    }

    pub fn emitted_bps(&self, now: SimTime, window: SimTime) -> f64 {
        let from = (now - window).max(0.0);
        let span = now - from;
        if span <= 0.0 {
            return 0.0;
        }
        self.emission_log
            .iter()
            .rev()
            .take_while(|(t, _)| *t > from)
            .map(|(_, bits)| bits)
            .sum::<f64>()
            / span
    }

    fn record_emission(&mut self, now: SimTime, bits: f64) {
        self.emitted_packets += 1;
        self.emitted_bits += bits;
        self.emission_log.push_back((now, bits));
    }

    fn prune(&mut self, now: SimTime) {
        let horizon = now - LOG_RETENTION;
        while self.rtt_log.front().is_some_and(|(t, _)| *t < horizon) {
            self.rtt_log.pop_front();
        }
        while self.outcome_log.front().is_some_and(|(t, _)| *t < horizon) {
            self.outcome_log.pop_front();
        }
        while self.emission_log.front().is_some_and(|(t, _)| *t < horizon) {
            self.emission_log.pop_front();
        }
    }
}

/// Constant-rate timer anchored so that rounding never accumulates.
#[derive(Debug, Clone, Copy)]
struct Cadence {
    anchor: SimTime,
    index: u64,
    period: SimTime,
    pending_period: Option<SimTime>,
}

impl Cadence {
    fn new(start: SimTime, period: SimTime) -> Self {
        Self {
            anchor: start,
            index: 0,
            period,
            pending_period: None,
        }
    }

    fn first(&self) -> SimTime {
        self.anchor
    }

    /// Called at each firing; returns the next firing time.
    fn advance(&mut self, now: SimTime) -> SimTime {
        if let Some(period) = self.pending_period.take() {
            self.anchor = now;
            self.index = 0;
            self.period = period;
        }
        self.index += 1;
        self.anchor + self.index as f64 * self.period
    }
}

#[derive(Debug, Clone)]
enum Behavior {
    SmsServer,
    SmsClient {
        cadence: Cadence,
        next_seq: u64,
        pending: BTreeMap<u64, SimTime>,
    },
    Video {
        cadence: Cadence,
    },
    Transcoder {
        cadence: Cadence,
        source_bitrate: f64,
        credit: f64,
        maturing: VecDeque<(SimTime, f64)>,
    },
}

#[derive(Debug, Clone)]
pub struct AppInstance {
    pub id: AppId,
    pub spec: AppSpec,
    pub side: Side,
    pub port: PortId,
    /// Default destination address of emitted packets.
    pub peer: PortId,
    pub state: AppState,
    pub started_at: SimTime,
    pub stopped_at: Option<SimTime>,
    pub kpis: AppKpis,
    behavior: Behavior,
}

impl AppInstance {
    pub fn is_running(&self) -> bool {
        self.state == AppState::Running
    }

    pub fn flow(&self) -> &FlowId {
        self.spec.flow()
    }

    /// Current emission rate in bits/s (0 for reactive apps).
    pub fn bitrate(&self) -> f64 {
        match (&self.spec, &self.behavior) {
            (AppSpec::VideoServer { packet_size, .. }, Behavior::Video { cadence })
            | (AppSpec::Transcoder { packet_size, .. }, Behavior::Transcoder { cadence, .. }) => {
                f64::from(*packet_size) * 8.0 / cadence.pending_period.unwrap_or(cadence.period)
            }
            (AppSpec::SmsClient { params, .. }, _) => {
                f64::from(params.request_size) * 8.0 / params.interval
            }
            _ => 0.0,
        }
    }

    fn packet(&self, now: SimTime, size: u32, dst: PortId, payload: Payload) -> Packet {
        Packet {
            headers: Headers {
                flow: self.flow().clone(),
                src: self.port,
                dst,
                hops: 0,
                stage: 0,
            },
            size,
            created_at: now,
            payload,
        }
    }
}

/// What an application wants done after a callback.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AppOutput {
    /// Packets to hand to the app's switch port now.
    pub packets: Vec<Packet>,
    /// Next emission callback.
    pub next_emission: Option<SimTime>,
    /// SMS request sequence number and its timeout deadline.
    pub timeout: Option<(u64, SimTime)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SmsOutcome {
    Rtt(SimTime),
    Timeout,
    /// Response to a request already resolved or never sent.
    Stale,
}

#[derive(Debug, Clone)]
pub struct AppManager {
    instantiation_latency: SimTime,
    apps: BTreeMap<AppId, AppInstance>,
}

impl Default for AppManager {
    fn default() -> Self {
        Self::new(DEFAULT_INSTANTIATION_LATENCY)
    }
}

impl AppManager {
    pub fn new(instantiation_latency: SimTime) -> Self {
        Self {
            instantiation_latency,
            apps: BTreeMap::new(),
        }
    }

    pub fn instantiation_latency(&self) -> SimTime {
        self.instantiation_latency
    }

    pub fn get(&self, id: &AppId) -> Result<&AppInstance, AppError> {
        self.apps
            .get(id)
            .ok_or_else(|| AppError::UnknownApp(id.clone()))
    }

    fn get_mut(&mut self, id: &AppId) -> Result<&mut AppInstance, AppError> {
        self.apps
            .get_mut(id)
            .ok_or_else(|| AppError::UnknownApp(id.clone()))
    }

    pub fn apps(&self) -> impl Iterator<Item = &AppInstance> {
        self.apps.values()
    }

    pub fn running(&self) -> impl Iterator<Item = &AppInstance> {
        self.apps.values().filter(|a| a.is_running())
    }

    /// The running source (video server or SMS client) of a flow.
    pub fn source_of(&self, flow: &FlowId) -> Option<&AppInstance> {
        self.running().find(|a| {
            matches!(
                a.spec,
                AppSpec::VideoServer { .. } | AppSpec::SmsClient { .. }
            ) && a.flow() == flow
        })
    }

    pub fn transcoder_of(&self, flow: &FlowId) -> Option<&AppInstance> {
        self.running()
            .find(|a| matches!(a.spec, AppSpec::Transcoder { .. }) && a.flow() == flow)
    }

    /// Checks a spec against the current app set without instantiating.
    pub fn check(&self, id: &AppId, spec: &AppSpec) -> Result<(), AppError> {
        if self.apps.contains_key(id) {
            return Err(AppError::DuplicateApp(id.clone()));
        }
        spec.validate(id)?;
        match spec {
            AppSpec::SmsClient { server, .. } => {
                if !self
                    .apps
                    .get(server)
                    .is_some_and(|s| s.is_running() && matches!(s.spec, AppSpec::SmsServer { .. }))
                {
                    return Err(AppError::MissingPeer {
                        app: id.clone(),
                        peer: server.clone(),
                    });
                }
            }
            AppSpec::Transcoder {
                input_flow,
                target_bitrate,
                ..
            } => {
                let source = self
                    .source_of(input_flow)
                    .ok_or_else(|| AppError::InvalidSpec {
                        app: id.clone(),
                        reason: format!("no running source for flow `{input_flow}`"),
                    })?;
                if *target_bitrate > source.bitrate() {
                    return Err(AppError::InvalidSpec {
                        app: id.clone(),
                        reason: format!(
                            "target {} b/s exceeds input rate {} b/s",
                            target_bitrate,
                            source.bitrate()
                        ),
                    });
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Registers an instance on `port`. Returns the time of its first
    /// emission callback, if it emits on its own.
    pub fn instantiate(
        &mut self,
        now: SimTime,
        id: AppId,
        spec: AppSpec,
        side: Side,
        port: PortId,
        peer: PortId,
    ) -> Result<Option<SimTime>, AppError> {
        self.check(&id, &spec)?;
        let start = now + self.instantiation_latency;
        let behavior = match &spec {
            AppSpec::SmsServer { .. } => Behavior::SmsServer,
            AppSpec::SmsClient { params, .. } => Behavior::SmsClient {
                cadence: Cadence::new(start, params.interval),
                next_seq: 0,
                pending: BTreeMap::new(),
            },
            AppSpec::VideoServer {
                bitrate,
                packet_size,
                ..
            } => Behavior::Video {
                cadence: Cadence::new(start, f64::from(*packet_size) * 8.0 / bitrate),
            },
            AppSpec::Transcoder {
                input_flow,
                target_bitrate,
                packet_size,
                ..
            } => Behavior::Transcoder {
                cadence: Cadence::new(start, f64::from(*packet_size) * 8.0 / target_bitrate),
                source_bitrate: self
                    .source_of(input_flow)
                    .map(|s| s.bitrate())
                    .unwrap_or(*target_bitrate),
                credit: 0.0,
                maturing: VecDeque::new(),
            },
        };
        let first = match &behavior {
            Behavior::SmsServer => None,
            Behavior::SmsClient { cadence, .. }
            | Behavior::Video { cadence }
            | Behavior::Transcoder { cadence, .. } => Some(cadence.first()),
        };
        let instance = AppInstance {
            id: id.clone(),
            spec,
            side,
            port,
            peer,
            state: AppState::Running,
            started_at: now,
            stopped_at: None,
            kpis: AppKpis::default(),
            behavior,
        };
        self.apps.insert(id, instance);
        Ok(first)
    }

    /// Stops an instance; its KPIs stay readable.
    pub fn teardown(&mut self, now: SimTime, id: &AppId) -> Result<PortId, AppError> {
        let app = self.get_mut(id)?;
        if !app.is_running() {
            return Err(AppError::NotRunning(id.clone()));
        }
        app.state = AppState::Stopped;
        app.stopped_at = Some(now);
        if let Behavior::SmsClient { pending, .. } = &mut app.behavior {
            pending.clear();
        }
        Ok(app.port)
    }

    pub fn set_bitrate(&mut self, id: &AppId, bitrate: f64) -> Result<(), AppError> {
        if !(bitrate.is_finite() && bitrate > 0.0) {
            return Err(AppError::NonPositiveRate(bitrate));
        }
        let app = self.get_mut(id)?;
        if !app.is_running() {
            return Err(AppError::NotRunning(id.clone()));
        }
        let flow = app.flow().clone();
        let is_source = match (&app.spec, &mut app.behavior) {
            (AppSpec::VideoServer { packet_size, .. }, Behavior::Video { cadence }) => {
                set_period(cadence, *packet_size, bitrate);
                true
            }
            (AppSpec::Transcoder { packet_size, .. }, Behavior::Transcoder { cadence, .. }) => {
                set_period(cadence, *packet_size, bitrate);
                false
            }
            (spec, _) => {
                return Err(AppError::WrongKind {
                    app: id.clone(),
                    kind: spec.kind(),
                })
            }
        };
        if let AppSpec::VideoServer { bitrate: b, .. } = &mut app.spec {
            *b = bitrate;
        }
        if let AppSpec::Transcoder { target_bitrate, .. } = &mut app.spec {
            *target_bitrate = bitrate;
        }
        if is_source {
            for t in self.apps.values_mut().filter(|a| a.is_running()) {
                if let (
                    AppSpec::Transcoder { input_flow, .. },
                    Behavior::Transcoder { source_bitrate, .. },
                ) = (&t.spec, &mut t.behavior)
                {
                    if *input_flow == flow {
                        *source_bitrate = bitrate;
                    }
                }
            }
        }
        Ok(())
    }

    /// Emission callback for self-clocked apps.
    pub fn on_emission(&mut self, now: SimTime, id: &AppId) -> Result<AppOutput, AppError> {
        let app = self.get_mut(id)?;
        if !app.is_running() {
            return Ok(AppOutput::default());
        }
        let mut out = AppOutput::default();
        match app.spec.clone() {
            AppSpec::VideoServer { packet_size, .. } => {
                let packet = app.packet(now, packet_size, app.peer, Payload::Media);
                app.kpis.record_emission(now, packet.bits());
                out.packets.push(packet);
                if let Behavior::Video { cadence } = &mut app.behavior {
                    out.next_emission = Some(cadence.advance(now));
                }
            }
            AppSpec::SmsClient { .. } => return self.sms_round(now, id),
            AppSpec::Transcoder { packet_size, .. } => {
                let bits = f64::from(packet_size) * 8.0;
                let emit = match &mut app.behavior {
                    Behavior::Transcoder {
                        cadence,
                        credit,
                        maturing,
                        ..
                    } => {
                        while maturing.front().is_some_and(|(t, _)| *t <= now) {
                            *credit += maturing.pop_front().map_or(0.0, |(_, b)| b);
                        }
                        out.next_emission = Some(cadence.advance(now));
                        // tolerate float residue from the rate ratio
                        if *credit >= bits * (1.0 - 1e-9) {
                            *credit -= bits;
                            true
                        } else {
                            false
                        }
                    }
                    _ => false,
                };
                if emit {
                    let mut packet = app.packet(now, packet_size, app.peer, Payload::Media);
                    packet.headers.stage = 1;
                    app.kpis.record_emission(now, bits);
                    out.packets.push(packet);
                }
            }
            AppSpec::SmsServer { .. } => {}
        }
        app.kpis.prune(now);
        Ok(out)
    }

    /// One SMS request: emits it and arms its timeout.
    pub fn sms_round(&mut self, now: SimTime, id: &AppId) -> Result<AppOutput, AppError> {
        let app = self.get_mut(id)?;
        let AppSpec::SmsClient { params, .. } = app.spec.clone() else {
            return Err(AppError::WrongKind {
                app: id.clone(),
                kind: app.spec.kind(),
            });
        };
        let Behavior::SmsClient {
            cadence,
            next_seq,
            pending,
        } = &mut app.behavior
        else {
            unreachable!("sms client behavior")
        };
        let seq = *next_seq;
        *next_seq += 1;
        pending.insert(seq, now);
        let next = cadence.advance(now);
        let packet = app.packet(
            now,
            params.request_size,
            app.peer,
            Payload::SmsRequest { seq },
        );
        app.kpis.sms_attempts += 1;
        app.kpis.record_emission(now, packet.bits());
        app.kpis.prune(now);
        Ok(AppOutput {
            packets: vec![packet],
            next_emission: Some(next),
            timeout: Some((seq, now + params.timeout)),
        })
    }

    pub fn on_timeout(&mut self, now: SimTime, id: &AppId, seq: u64) -> Result<bool, AppError> {
        let app = self.get_mut(id)?;
        let Behavior::SmsClient { pending, .. } = &mut app.behavior else {
            return Ok(false);
        };
        if pending.remove(&seq).is_none() {
            return Ok(false);
        }
        app.kpis.sms_timeouts += 1;
        app.kpis.outcome_log.push_back((now, false));
        Ok(true)
    }

    /// Packet delivered to an app's port.
    pub fn on_receive(
        &mut self,
        now: SimTime,
        id: &AppId,
        packet: Packet,
    ) -> Result<(AppOutput, Option<SmsOutcome>), AppError> {
        let app = self.get_mut(id)?;
        if !app.is_running() {
            return Err(AppError::NotRunning(id.clone()));
        }
        let mut out = AppOutput::default();
        let mut outcome = None;
        match (&app.spec, packet.payload) {
            (AppSpec::SmsServer { params, .. }, Payload::SmsRequest { seq }) => {
                app.kpis.received_packets += 1;
                app.kpis.received_bits += packet.bits();
                let reply = app.packet(
                    now,
                    params.response_size,
                    packet.headers.src,
                    Payload::SmsResponse { seq },
                );
                app.kpis.record_emission(now, reply.bits());
                out.packets.push(reply);
            }
            (AppSpec::SmsClient { .. }, Payload::SmsResponse { seq }) => {
                app.kpis.received_packets += 1;
                app.kpis.received_bits += packet.bits();
                let Behavior::SmsClient { pending, .. } = &mut app.behavior else {
                    unreachable!("sms client behavior")
                };
                outcome = Some(match pending.remove(&seq) {
                    Some(sent) => {
                        let rtt = now - sent;
                        app.kpis.sms_successes += 1;
                        app.kpis.rtt_log.push_back((now, rtt));
                        app.kpis.outcome_log.push_back((now, true));
                        SmsOutcome::Rtt(rtt)
                    }
                    None => SmsOutcome::Stale,
                });
            }
            (AppSpec::Transcoder { .. }, _) => {
                drop(out);
                return self
                    .transcode(now, id, packet)
                    .map(|()| (AppOutput::default(), None));
            }
            _ => {
                app.kpis.received_packets += 1;
                app.kpis.received_bits += packet.bits();
            }
        }
        app.kpis.prune(now);
        Ok((out, outcome))
    }

    /// Feeds an input packet to a transcoder. Output leaves on the
    /// transcoder's own cadence once `processing_delay` has elapsed.
    pub fn transcode(&mut self, now: SimTime, id: &AppId, packet: Packet) -> Result<(), AppError> {
        let app = self.get_mut(id)?;
        let AppSpec::Transcoder {
            input_flow,
            target_bitrate,
            processing_delay,
            ..
        } = &app.spec
        else {
            return Err(AppError::WrongKind {
                app: id.clone(),
                kind: app.spec.kind(),
            });
        };
        if packet.flow() != input_flow {
            app.kpis.foreign_drops += 1;
            return Err(AppError::UnexpectedFlow {
                app: id.clone(),
                flow: packet.flow().clone(),
            });
        }
        let (target, delay) = (*target_bitrate, *processing_delay);
        app.kpis.received_packets += 1;
        app.kpis.received_bits += packet.bits();
        if let Behavior::Transcoder {
            source_bitrate,
            maturing,
            ..
        } = &mut app.behavior
        {
            let ratio = (target / *source_bitrate).min(1.0);
            maturing.push_back((now + delay, packet.bits() * ratio));
        }
        Ok(())
    }

    /// Credits media that reached the UE to the flow's source.
    pub fn record_delivery(&mut self, flow: &FlowId, bits: f64) {
        if let Some(app) = self
            .apps
            .values_mut()
            .find(|a| matches!(a.spec, AppSpec::VideoServer { .. }) && a.flow() == flow)
        {
            app.kpis.received_packets += 1;
            app.kpis.received_bits += bits;
        }
    }
}

fn set_period(cadence: &mut Cadence, packet_size: u32, bitrate: f64) {
    let period = f64::from(packet_size) * 8.0 / bitrate;
    if period != cadence.period || cadence.pending_period.is_some() {
        cadence.pending_period = Some(period);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(bitrate: f64) -> AppSpec {
        AppSpec::VideoServer {
            flow: FlowId::new("video1"),
            bitrate,
            packet_size: 1200,
        }
    }

    /// Runs the emission callbacks of `id` until `t_end`, returning emission times.
    fn emissions(m: &mut AppManager, id: &AppId, first: SimTime, t_end: SimTime) -> Vec<SimTime> {
        let mut times = Vec::new();
        let mut next = Some(first);
        while let Some(t) = next.filter(|t| *t <= t_end) {
            let out = m.on_emission(t, id).unwrap();
            if !out.packets.is_empty() {
                times.push(t);
            }
            next = out.next_emission;
        }
        times
    }

    #[test]
    fn video_cbr_period() {
        let mut m = AppManager::default();
        let id = AppId::new("v");
        let first = m
            .instantiate(
                0.0,
                id.clone(),
                video(900_000.0),
                Side::Mec,
                PortId(1),
                PortId(9),
            )
            .unwrap()
            .unwrap();
        assert_eq!(first, 0.5);
        let times = emissions(&mut m, &id, first, 10.5);
        let period = times[1] - times[0];
        assert!((period - 1200.0 * 8.0 / 900_000.0).abs() < 1e-12);
        let rate = m.get(&id).unwrap().kpis.emitted_bps(10.5, 10.0);
        assert!((rate - 900_000.0).abs() / 900_000.0 < 0.005, "{rate}");
    }

    #[test]
    fn sms_client_requires_server() {
        let mut m = AppManager::default();
        let err = m
            .instantiate(
                0.0,
                AppId::new("c"),
                AppSpec::SmsClient {
                    flow: FlowId::new("sms"),
                    server: AppId::new("s"),
                    params: SmsParams::default(),
                },
                Side::Mec,
                PortId(1),
                PortId(2),
            )
            .unwrap_err();
        assert!(matches!(err, AppError::MissingPeer { .. }));
    }

    #[test]
    fn double_teardown_fails() {
        let mut m = AppManager::default();
        let id = AppId::new("v");
        m.instantiate(0.0, id.clone(), video(1e5), Side::Mec, PortId(1), PortId(2))
            .unwrap();
        m.teardown(1.0, &id).unwrap();
        assert_eq!(m.teardown(2.0, &id), Err(AppError::NotRunning(id.clone())));
        assert!(m.on_emission(2.0, &id).unwrap().packets.is_empty());
        assert!(m.teardown(2.0, &AppId::new("nope")).is_err());
    }

    #[test]
    fn set_bitrate_checks_kind_and_value() {
        let mut m = AppManager::default();
        m.instantiate(
            0.0,
            AppId::new("s"),
            AppSpec::SmsServer {
                flow: FlowId::new("sms"),
                params: SmsParams::default(),
            },
            Side::Ue,
            PortId(1),
            PortId(2),
        )
        .unwrap();
        assert!(matches!(
            m.set_bitrate(&AppId::new("s"), 1e5),
            Err(AppError::WrongKind { .. })
        ));
        assert_eq!(
            m.set_bitrate(&AppId::new("s"), 0.0),
            Err(AppError::NonPositiveRate(0.0))
        );
    }

    #[test]
    fn bitrate_change_applies_from_next_emission() {
        let mut m = AppManager::default();
        let id = AppId::new("v");
        let first = m
            .instantiate(
                0.0,
                id.clone(),
                video(900_000.0),
                Side::Mec,
                PortId(1),
                PortId(2),
            )
            .unwrap()
            .unwrap();
        let mut next = first;
        while next < 20.0 {
            next = m.on_emission(next, &id).unwrap().next_emission.unwrap();
        }
        let before = m.get(&id).unwrap().kpis.emitted_bps(next, 10.0);
        m.set_bitrate(&id, 600_000.0).unwrap();
        let after_change_first = next;
        while next < 40.0 {
            next = m.on_emission(next, &id).unwrap().next_emission.unwrap();
        }
        let after = m.get(&id).unwrap().kpis.emitted_bps(next, 10.0);
        assert!(after_change_first < 20.0 + 0.011);
        assert!(
            (after / before - 2.0 / 3.0).abs() < 0.01,
            "{before} {after}"
        );
    }

    #[test]
    fn same_bitrate_is_identity() {
        let mut m = AppManager::default();
        let id = AppId::new("v");
        let first = m
            .instantiate(
                0.0,
                id.clone(),
                video(100_000.0),
                Side::Mec,
                PortId(1),
                PortId(2),
            )
            .unwrap()
            .unwrap();
        let a = emissions(&mut m, &id, first, 5.0);
        let mut m2 = AppManager::default();
        m2.instantiate(
            0.0,
            id.clone(),
            video(100_000.0),
            Side::Mec,
            PortId(1),
            PortId(2),
        )
        .unwrap();
        m2.set_bitrate(&id, 100_000.0).unwrap();
        let b = emissions(&mut m2, &id, first, 5.0);
        assert_eq!(a, b);
    }

    #[test]
    fn sms_round_trip_and_timeout() {
        let mut m = AppManager::default();
        let flow = FlowId::new("sms");
        m.instantiate(
            0.0,
            AppId::new("srv"),
            AppSpec::SmsServer {
                flow: flow.clone(),
                params: SmsParams::default(),
            },
            Side::Ue,
            PortId(5),
            PortId(1),
        )
        .unwrap();
        let client = AppId::new("cli");
        m.instantiate(
            0.0,
            client.clone(),
            AppSpec::SmsClient {
                flow,
                server: AppId::new("srv"),
                params: SmsParams::default(),
            },
            Side::Mec,
            PortId(1),
            PortId(5),
        )
        .unwrap();
        let out = m.on_emission(0.5, &client).unwrap();
        assert_eq!(out.timeout, Some((0, 2.5)));
        assert_eq!(out.next_emission, Some(1.5));
        let request = out.packets[0].clone();
        let (reply, _) = m.on_receive(0.51, &AppId::new("srv"), request).unwrap();
        assert_eq!(reply.packets[0].headers.dst, PortId(1));
        let (_, outcome) = m
            .on_receive(0.52, &client, reply.packets[0].clone())
            .unwrap();
        match outcome {
            Some(SmsOutcome::Rtt(rtt)) => assert!((rtt - 0.02).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        // second request never answered
        let out = m.on_emission(1.5, &client).unwrap();
        let (seq, deadline) = out.timeout.unwrap();
        assert!(m.on_timeout(deadline, &client, seq).unwrap());
        assert!(!m.on_timeout(deadline, &client, 0).unwrap());
        let k = &m.get(&client).unwrap().kpis;
        assert_eq!(k.sms_successes, 1);
        assert_eq!(k.sms_timeouts, 1);
        assert_eq!(k.success_rate(4.0, 60.0), Some(0.5));
        assert_eq!(k.rtt_max(4.0, 10.0), Some(0.020000000000000018));
    }

    #[test]
    fn transcoder_rejects_foreign_flow_and_faster_target() {
        let mut m = AppManager::default();
        m.instantiate(
            0.0,
            AppId::new("v"),
            video(200_000.0),
            Side::Mec,
            PortId(1),
            PortId(9),
        )
        .unwrap();
        let too_fast = AppSpec::Transcoder {
            input_flow: FlowId::new("video1"),
            target_bitrate: 300_000.0,
            processing_delay: 0.02,
            packet_size: 1200,
        };
        assert!(m
            .instantiate(
                0.0,
                AppId::new("t"),
                too_fast,
                Side::Mec,
                PortId(2),
                PortId(2)
            )
            .is_err());
        let ok = AppSpec::Transcoder {
            input_flow: FlowId::new("video1"),
            target_bitrate: 110_000.0,
            processing_delay: 0.02,
            packet_size: 1200,
        };
        m.instantiate(0.0, AppId::new("t"), ok, Side::Mec, PortId(2), PortId(2))
            .unwrap();
        let mut p = m
            .get(&AppId::new("v"))
            .unwrap()
            .packet(0.0, 1200, PortId(2), Payload::Media);
        p.headers.flow = FlowId::new("other");
        assert!(matches!(
            m.transcode(0.0, &AppId::new("t"), p),
            Err(AppError::UnexpectedFlow { .. })
        ));
        assert_eq!(m.get(&AppId::new("t")).unwrap().kpis.foreign_drops, 1);
    }
}
