//! The emulated edge node: radios, the MEC- and UE-side switches, apps,
//! telemetry and controller wired onto one event queue.

use std::collections::BTreeMap;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apps::{AppError, AppId, AppInstance, AppKpis, AppManager, AppSpec, AppState, Side};
use crate::controller::{
    ActionLogEntry, Actuator, ControlAction, Controller, FlowKind, FlowView, LinkView, Mode,
    PolicyInput, Rejection,
};
use crate::engine::{ClockState, EngineError, EventHandle, Pacer, RunLog, Scheduler, SimTime};
use crate::radio::{
    DepartureOutcome, Direction, EnqueueOutcome, FlowCounters, FlowId, Packet, PortId, Radio,
    RadioError, RadioKpis,
};
use crate::scenario::{AppLaunch, ScenarioScript};
use crate::switch::{
    Action, FlowRule, ForwardOutcome, InstalledRule, Match, Port, PortCounters, PortKind, RuleId,
    Switch, SwitchError,
};
use crate::telemetry::{
    Comparator, KpiSample, Metric, MetricSource, SlaReport, Source, Telemetry, TelemetryError,
    SHORT_WINDOW,
};

const DELIVERY_PRIORITY: i32 = 1 << 24;
const FLOW_PRIORITY: i32 = 10;
/// Fewer transmissions than this in the window and a PER reading is not
/// trusted by the policy engine.
pub const MIN_PER_SAMPLES: u64 = 50;
/// Longest wall-clock sleep between command checks in paced runs.
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Radio(#[from] RadioError),
    #[error(transparent)]
    Switch(#[from] SwitchError),
    #[error(transparent)]
    App(#[from] AppError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug)]
pub enum Event {
    Tick(u64),
    Launch(usize),
    Emission(AppId),
    SmsTimeout {
        app: AppId,
        seq: u64,
    },
    Departure {
        label: String,
        dir: Direction,
    },
    Arrival {
        label: String,
        dir: Direction,
        packet: Packet,
    },
    ChannelError(usize),
    Scripted(usize),
}

#[derive(Debug, Clone, Serialize)]
struct FlowPath {
    waveform: String,
    priority: i32,
    rules: Vec<(Side, RuleId)>,
    transcoder: Option<AppId>,
}

#[derive(Debug, Clone, Copy, Default)]
struct LinkState {
    last_reconfig: SimTime,
    last_known_per: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SinkStats {
    pub packets: u64,
    pub bits: f64,
}

/// Everything actions act on.
pub struct Plant {
    sched: Scheduler<Event>,
    radio: Radio,
    mec: Switch,
    ue: Switch,
    radio_ports: BTreeMap<(Side, String), PortId>,
    sink: PortId,
    next_port: u32,
    apps: AppManager,
    delivery_rules: BTreeMap<AppId, RuleId>,
    flows: BTreeMap<FlowId, FlowPath>,
    emissions: BTreeMap<AppId, EventHandle>,
    departures: BTreeMap<(String, Direction), EventHandle>,
    links: BTreeMap<String, LinkState>,
    sink_stats: BTreeMap<FlowId, SinkStats>,
    kpi_window: SimTime,
}

fn receiving_side(dir: Direction) -> Side {
    match dir {
        Direction::Down => Side::Ue,
        Direction::Up => Side::Mec,
    }
}

fn sending_dir(side: Side) -> Direction {
    match side {
        Side::Mec => Direction::Down,
        Side::Ue => Direction::Up,
    }
}

impl Plant {
    fn new(script: &ScenarioScript) -> Result<Self, NodeError> {
        let radio = Radio::new(&script.waveforms, script.seed)?;
        let mut plant = Plant {
            sched: Scheduler::new(),
            radio,
            mec: Switch::new("mec"),
            ue: Switch::new("ue"),
            radio_ports: BTreeMap::new(),
            sink: PortId(0),
            next_port: 1,
            apps: AppManager::default(),
            delivery_rules: BTreeMap::new(),
            flows: BTreeMap::new(),
            emissions: BTreeMap::new(),
            departures: BTreeMap::new(),
            links: BTreeMap::new(),
            sink_stats: BTreeMap::new(),
            kpi_window: SHORT_WINDOW,
        };
        let labels: Vec<String> = plant.radio.labels().map(str::to_string).collect();
        for label in labels {
            for side in [Side::Mec, Side::Ue] {
                let port = plant.alloc_port();
                plant
                    .switch_mut(side)
                    .add_port(port, PortKind::Radio(label.clone()))?;
                plant.radio_ports.insert((side, label.clone()), port);
            }
            plant.links.insert(label, LinkState::default());
        }
        plant.sink = plant.alloc_port();
        plant.ue.add_port(plant.sink, PortKind::Sink)?;
        plant.ue.install_rule(FlowRule::output(
            DELIVERY_PRIORITY,
            Match::dst(plant.sink),
            plant.sink,
        ))?;
        Ok(plant)
    }

    fn alloc_port(&mut self) -> PortId {
        let id = PortId(self.next_port);
        self.next_port += 1;
        id
    }

    fn now(&self) -> SimTime {
        self.sched.now()
    }

    fn switch_mut(&mut self, side: Side) -> &mut Switch {
        match side {
            Side::Mec => &mut self.mec,
            Side::Ue => &mut self.ue,
        }
    }

    pub fn switch(&self, side: Side) -> &Switch {
        match side {
            Side::Mec => &self.mec,
            Side::Ue => &self.ue,
        }
    }

    pub fn radio(&self) -> &Radio {
        &self.radio
    }

    pub fn apps(&self) -> &AppManager {
        &self.apps
    }

    pub fn sink_stats(&self) -> &BTreeMap<FlowId, SinkStats> {
        &self.sink_stats
    }

    /// Waveform currently carrying `flow`.
    pub fn flow_waveform(&self, flow: &FlowId) -> Option<&str> {
        self.flows.get(flow).map(|p| p.waveform.as_str())
    }

    pub fn flow_transcoder(&self, flow: &FlowId) -> Option<&AppId> {
        self.flows.get(flow)?.transcoder.as_ref()
    }

    fn schedule(&mut self, at: SimTime, event: Event) -> EventHandle {
        self.sched
            .schedule(at, event)
            .expect("node schedules only at or after the current time")
    }

    /// Attaches an app to a fresh port on its side's switch.
    fn attach(
        &mut self,
        id: &AppId,
        spec: AppSpec,
        side: Side,
        peer: PortId,
    ) -> Result<(), NodeError> {
        let now = self.now();
        self.apps.check(id, &spec)?;
        let port = self.alloc_port();
        self.switch_mut(side)
            .add_port(port, PortKind::App(id.0.clone()))?;
        let rule = self.switch_mut(side).install_rule(FlowRule::output(
            DELIVERY_PRIORITY,
            Match::dst(port),
            port,
        ))?;
        self.delivery_rules.insert(id.clone(), rule);
        let first = self
            .apps
            .instantiate(now, id.clone(), spec, side, port, peer)?;
        if let Some(t) = first {
            let handle = self.schedule(t, Event::Emission(id.clone()));
            self.emissions.insert(id.clone(), handle);
        }
        Ok(())
    }

    /// Stops an app and releases its port. Rules still pointing at the port
    /// are left alone.
    pub fn teardown_app(&mut self, id: &AppId) -> Result<(), NodeError> {
        let now = self.now();
        let side = self.apps.get(id)?.side;
        let port = self.apps.teardown(now, id)?;
        if let Some(h) = self.emissions.remove(id) {
            self.sched.cancel(h);
        }
        if let Some(rule) = self.delivery_rules.remove(id) {
            self.switch_mut(side).remove_rule(rule)?;
        }
        self.switch_mut(side).remove_port(port)?;
        Ok(())
    }

    fn launch(&mut self, launch: &AppLaunch) -> Result<(), NodeError> {
        let peer = match &launch.spec {
            AppSpec::VideoServer { .. } => self.sink,
            AppSpec::SmsClient { server, .. } => self.apps.get(server)?.port,
            _ => PortId(0),
        };
        self.attach(&launch.id, launch.spec.clone(), launch.side, peer)?;
        let flow = launch.spec.flow().clone();
        let waveform = launch
            .waveform
            .clone()
            .ok_or_else(|| NodeError::Config(format!("app `{}` has no waveform", launch.id)))?;
        let path = self.flows.entry(flow.clone()).or_insert_with(|| FlowPath {
            waveform: waveform.clone(),
            priority: FLOW_PRIORITY - 1,
            rules: Vec::new(),
            transcoder: None,
        });
        let (waveform, transcoder) = (path.waveform.clone(), path.transcoder.clone());
        self.reroute(&flow, &waveform, transcoder)
            .map_err(|r| NodeError::Config(r.to_string()))
    }

    /// Send-side rules of `flow` when carried on `waveform`.
    fn flow_rules(
        &self,
        flow: &FlowId,
        waveform: &str,
        transcoder: Option<&AppInstance>,
    ) -> Vec<(Side, Match, Vec<Action>)> {
        let radio = |side: Side| self.radio_ports[&(side, waveform.to_string())];
        let mut rules = Vec::new();
        for app in self.apps.running().filter(|a| a.flow() == flow) {
            let from_app = Match::flow(flow).in_port(app.port);
            match (&app.spec, transcoder) {
                (AppSpec::Transcoder { .. }, _) => {}
                (AppSpec::VideoServer { .. }, Some(tc)) => {
                    rules.push((
                        app.side,
                        from_app,
                        vec![Action::SetDst(tc.port), Action::Output(tc.port)],
                    ));
                    rules.push((
                        tc.side,
                        Match::flow(flow).in_port(tc.port),
                        vec![Action::Output(radio(tc.side))],
                    ));
                }
                _ => rules.push((app.side, from_app, vec![Action::Output(radio(app.side))])),
            }
        }
        rules
    }

    /// Make-before-break: installs the flow's new rule set one priority
    /// above the current one, then removes the old rules.
    fn reroute(
        &mut self,
        flow: &FlowId,
        waveform: &str,
        transcoder: Option<AppId>,
    ) -> Result<(), Rejection> {
        let path = self
            .flows
            .get(flow)
            .ok_or_else(|| Rejection::UnknownEntity(format!("flow `{flow}`")))?;
        let priority = path.priority + 1;
        let tc = match &transcoder {
            Some(id) => Some(
                self.apps
                    .get(id)
                    .map_err(|e| Rejection::Invalid(e.to_string()))?
                    .clone(),
            ),
            None => None,
        };
        let specs = self.flow_rules(flow, waveform, tc.as_ref());
        let mut installed = Vec::new();
        for (side, m, actions) in specs {
            match self
                .switch_mut(side)
                .install_rule(FlowRule::new(priority, m, actions))
            {
                Ok(id) => installed.push((side, id)),
                Err(e) => {
                    for (side, id) in installed {
                        let _ = self.switch_mut(side).remove_rule(id);
                    }
                    return Err(Rejection::Invalid(e.to_string()));
                }
            }
        }
        let path = self.flows.get_mut(flow).expect("checked above");
        let old = std::mem::replace(&mut path.rules, installed);
        path.priority = priority;
        path.waveform = waveform.to_string();
        path.transcoder = transcoder;
        for (side, id) in old {
            let _ = self.switch_mut(side).remove_rule(id);
        }
        Ok(())
    }

    fn forward(&mut self, side: Side, in_port: PortId, packet: Packet) {
        let now = self.now();
        let (port, packet) = match self.switch_mut(side).forward(in_port, packet) {
            ForwardOutcome::Output { port, packet } => (port, packet),
            ForwardOutcome::Dropped(reason) => {
                log::trace!("t={now:.6} drop on {side:?}: {reason:?}");
                return;
            }
        };
        let kind = self.switch(side).port(port).map(|p| p.kind.clone());
        match kind {
            Some(PortKind::App(id)) => self.deliver_to_app(AppId(id), packet),
            Some(PortKind::Radio(label)) => self.enqueue(&label, sending_dir(side), packet),
            Some(PortKind::Sink) => {
                let stats = self.sink_stats.entry(packet.flow().clone()).or_default();
                stats.packets += 1;
                stats.bits += packet.bits();
                self.apps.record_delivery(packet.flow(), packet.bits());
            }
            None => {}
        }
    }

    fn inject_from_app(&mut self, id: &AppId, packets: Vec<Packet>) {
        let Ok(app) = self.apps.get(id) else { return };
        let (side, port) = (app.side, app.port);
        for p in packets {
            self.forward(side, port, p);
        }
    }

    fn deliver_to_app(&mut self, id: AppId, packet: Packet) {
        let now = self.now();
        match self.apps.on_receive(now, &id, packet) {
            Ok((out, _)) => self.inject_from_app(&id, out.packets),
            Err(e) => log::debug!("t={now:.6} {e}"),
        }
    }

    fn enqueue(&mut self, label: &str, dir: Direction, packet: Packet) {
        let now = self.now();
        let Ok(wf) = self.radio.waveform_mut(label, dir) else {
            return;
        };
        if let EnqueueOutcome::Accepted { departure: Some(t) } = wf.enqueue(now, packet) {
            let h = self.schedule(
                t,
                Event::Departure {
                    label: label.to_string(),
                    dir,
                },
            );
            self.departures.insert((label.to_string(), dir), h);
        }
    }

    fn on_departure(&mut self, label: String, dir: Direction) -> Result<(), NodeError> {
        let now = self.now();
        self.departures.remove(&(label.clone(), dir));
        let Some(dep) = self
            .radio
            .waveform_mut(&label, dir)?
            .complete_departure(now)
        else {
            return Ok(());
        };
        if let DepartureOutcome::Delivered { arrives_at } = dep.outcome {
            self.schedule(
                arrives_at,
                Event::Arrival {
                    label: label.clone(),
                    dir,
                    packet: dep.packet,
                },
            );
        }
        if let Some(t) = dep.next_departure {
            let h = self.schedule(
                t,
                Event::Departure {
                    label: label.clone(),
                    dir,
                },
            );
            self.departures.insert((label, dir), h);
        }
        Ok(())
    }

    fn on_emission(&mut self, id: AppId) -> Result<(), NodeError> {
        let now = self.now();
        self.emissions.remove(&id);
        let out = self.apps.on_emission(now, &id)?;
        if let Some(t) = out.next_emission {
            let h = self.schedule(t, Event::Emission(id.clone()));
            self.emissions.insert(id.clone(), h);
        }
        if let Some((seq, deadline)) = out.timeout {
            self.schedule(
                deadline,
                Event::SmsTimeout {
                    app: id.clone(),
                    seq,
                },
            );
        }
        self.inject_from_app(&id, out.packets);
        Ok(())
    }

    fn measured_per(&self, label: &str) -> Option<f64> {
        let now = self.now();
        let state = self.links.get(label)?;
        let from = (now - self.kpi_window).max(state.last_reconfig);
        let (lost, sent) = self
            .radio
            .waveform(label, Direction::Down)
            .ok()?
            .measured_per_between(from, now)?;
        (sent >= MIN_PER_SAMPLES).then(|| lost as f64 / sent as f64)
    }

    fn update_link_estimates(&mut self) {
        let labels: Vec<String> = self.links.keys().cloned().collect();
        for label in labels {
            if let Some(per) = self.measured_per(&label) {
                if let Some(state) = self.links.get_mut(&label) {
                    state.last_known_per = Some(per);
                }
            }
        }
    }

    fn link_views(&self) -> Vec<LinkView> {
        let now = self.now();
        self.radio
            .interfaces()
            .iter()
            .map(|iface| {
                let kpis = iface.down.sample_kpis(now, self.kpi_window);
                LinkView {
                    label: iface.label().to_string(),
                    effective_capacity: iface.effective_capacity(),
                    code_rate: iface.code_rate(),
                    correction_threshold: iface.config.correction_threshold,
                    offered_bps: kpis.offered_bps,
                    measured_per: self.measured_per(iface.label()),
                    last_known_per: self.links.get(iface.label()).and_then(|s| s.last_known_per),
                }
            })
            .collect()
    }

    fn flow_views(&self, telemetry: &Telemetry) -> Vec<FlowView> {
        let mut views = Vec::new();
        for (flow, path) in &self.flows {
            let Some(source) = self.apps.source_of(flow) else {
                continue;
            };
            let kind = match source.spec {
                AppSpec::VideoServer { .. } => FlowKind::Video,
                _ => FlowKind::Sms,
            };
            let tc = path
                .transcoder
                .as_ref()
                .and_then(|id| self.apps.get(id).ok())
                .filter(|a| a.is_running());
            let rate = tc.map_or_else(|| source.bitrate(), |t| t.bitrate());
            let apps: Vec<AppId> = self
                .apps
                .running()
                .filter(|a| a.flow() == flow && !matches!(a.spec, AppSpec::Transcoder { .. }))
                .map(|a| a.id.clone())
                .collect();
            let tolerance = telemetry
                .specs()
                .iter()
                .filter(|s| apps.contains(&s.app))
                .flat_map(|s| &s.predicates)
                .filter(|p| {
                    p.metric == Metric::SuccessRate
                        && matches!(p.comparator, Comparator::Ge | Comparator::Gt)
                })
                .map(|p| 1.0 - p.bound)
                .reduce(f64::min);
            views.push(FlowView {
                flow: flow.clone(),
                kind,
                link: path.waveform.clone(),
                rate,
                transcoded: tc.is_some(),
                tolerance,
                apps,
            });
        }
        views
    }

    fn kpi_batch(&self, tick: SimTime) -> Vec<KpiSample> {
        let now = self.now();
        let w = self.kpi_window;
        let mut batch = Vec::new();
        let mut push = |source, subject: &str, metric: &str, value: f64| {
            batch.push(KpiSample::new(now, source, subject, metric, value));
        };
        for iface in self.radio.interfaces() {
            let label = iface.label();
            let k = iface.down.sample_kpis(now, w);
            push(Source::Radio, label, "load", k.load);
            push(Source::Radio, label, "offered_load", k.offered_load);
            push(Source::Radio, label, "offered_bps", k.offered_bps);
            push(Source::Radio, label, "delivered_bps", k.delivered_bps);
            if !k.insufficient_samples {
                push(Source::Radio, label, "residual_per", k.residual_per);
            }
            push(Source::Radio, label, "queue_bytes", k.queue_bytes as f64);
            push(
                Source::Radio,
                label,
                "effective_capacity",
                k.effective_capacity,
            );
            push(
                Source::Radio,
                label,
                "channel_per",
                iface.down.channel_per(),
            );
            push(
                Source::Radio,
                label,
                "code_rate",
                iface.code_rate().as_f64(),
            );
            let up = iface.up.sample_kpis(now, w);
            push(Source::Radio, label, "uplink_load", up.load);
            push(
                Source::Radio,
                label,
                "uplink_queue_bytes",
                up.queue_bytes as f64,
            );
        }
        for sw in [&self.mec, &self.ue] {
            push(
                Source::Switch,
                sw.name(),
                "default_drops",
                sw.default_drops() as f64,
            );
            push(
                Source::Switch,
                sw.name(),
                "hop_drops",
                sw.hop_drops() as f64,
            );
            push(Source::Switch, sw.name(), "rules", sw.rules().len() as f64);
        }
        for app in self.apps.running() {
            let id = app.id.as_str();
            push(Source::App, id, "emitted_bps", app.kpis.emitted_bps(now, w));
            if let AppSpec::SmsClient { .. } = app.spec {
                if let Some(rtt) = app.kpis.rtt_max(now, tick) {
                    push(Source::App, id, "rtt", rtt);
                }
                if let Some(rtt) = app.kpis.rtt_max(now, w) {
                    push(Source::App, id, "rtt_max", rtt);
                }
            }
            if let Some(s) = self.app_metric(&app.id, Metric::SuccessRate, w) {
                push(Source::App, id, "success_rate", s);
            }
        }
        batch
    }

    fn set_code_rate(
        &mut self,
        label: &str,
        rate: crate::radio::CodeRate,
    ) -> Result<(), Rejection> {
        let now = self.now();
        let retimed = self
            .radio
            .set_code_rate(now, label, rate)
            .map_err(|e| Rejection::Invalid(e.to_string()))?;
        for (dir, t) in retimed {
            if let Some(h) = self.departures.remove(&(label.to_string(), dir)) {
                self.sched.cancel(h);
            }
            let h = self.schedule(
                t,
                Event::Departure {
                    label: label.to_string(),
                    dir,
                },
            );
            self.departures.insert((label.to_string(), dir), h);
        }
        if let Some(state) = self.links.get_mut(label) {
            state.last_reconfig = now;
        }
        Ok(())
    }

    fn insert_transcoder(&mut self, flow: &FlowId, target: f64) -> Result<(), Rejection> {
        let path = self
            .flows
            .get(flow)
            .ok_or_else(|| Rejection::UnknownEntity(format!("flow `{flow}`")))?;
        if path.transcoder.is_some() {
            return Err(Rejection::Invalid(format!(
                "flow `{flow}` is already transcoded"
            )));
        }
        let waveform = path.waveform.clone();
        let source = self
            .apps
            .source_of(flow)
            .ok_or_else(|| Rejection::UnknownEntity(format!("running source of `{flow}`")))?;
        let AppSpec::VideoServer { packet_size, .. } = source.spec else {
            return Err(Rejection::Invalid(format!(
                "flow `{flow}` is not a video flow"
            )));
        };
        let peer = source.peer;
        let mut id = AppId::new(format!("transcoder-{flow}"));
        let mut n = 1;
        while self.apps.get(&id).is_ok() {
            n += 1;
            id = AppId::new(format!("transcoder-{flow}-{n}"));
        }
        let spec = AppSpec::Transcoder {
            input_flow: flow.clone(),
            target_bitrate: target,
            processing_delay: crate::apps::DEFAULT_PROCESSING_DELAY,
            packet_size,
        };
        self.attach(&id, spec, Side::Mec, peer)
            .map_err(|e| Rejection::Invalid(e.to_string()))?;
        if let Err(r) = self.reroute(flow, &waveform, Some(id.clone())) {
            let _ = self.teardown_app(&id);
            return Err(r);
        }
        Ok(())
    }

    fn remove_transcoder(&mut self, flow: &FlowId) -> Result<(), Rejection> {
        let path = self
            .flows
            .get(flow)
            .ok_or_else(|| Rejection::UnknownEntity(format!("flow `{flow}`")))?;
        let Some(tc) = path.transcoder.clone() else {
            return Err(Rejection::NoOp(format!("flow `{flow}` is not transcoded")));
        };
        let waveform = path.waveform.clone();
        self.reroute(flow, &waveform, None)?;
        self.teardown_app(&tc)
            .map_err(|e| Rejection::Invalid(e.to_string()))
    }

    fn check_waveform(&self, label: &str) -> Result<(), Rejection> {
        self.radio
            .get(label)
            .map(|_| ())
            .map_err(|_| Rejection::UnknownEntity(format!("waveform `{label}`")))
    }
}

impl Actuator for Plant {
    fn execute(&mut self, _now: SimTime, action: &ControlAction) -> Result<(), Rejection> {
        match action {
            ControlAction::MoveFlow { flow, waveform } => {
                self.check_waveform(waveform)?;
                let path = self
                    .flows
                    .get(flow)
                    .ok_or_else(|| Rejection::UnknownEntity(format!("flow `{flow}`")))?;
                if &path.waveform == waveform {
                    return Err(Rejection::NoOp(format!(
                        "`{flow}` is already on {waveform}"
                    )));
                }
                let tc = path.transcoder.clone();
                self.reroute(flow, waveform, tc)
            }
            ControlAction::SetCodeRate { waveform, rate } => {
                self.check_waveform(waveform)?;
                let current = self.radio.get(waveform).map(|i| i.code_rate()).ok();
                if current == Some(*rate) {
                    return Err(Rejection::NoOp(format!(
                        "{waveform} already at rate {rate}"
                    )));
                }
                self.set_code_rate(waveform, *rate)
            }
            ControlAction::InsertTranscoder {
                flow,
                target_bitrate,
            } => self.insert_transcoder(flow, *target_bitrate),
            ControlAction::RemoveTranscoder { flow } => self.remove_transcoder(flow),
            ControlAction::SetAppBitrate { app, bitrate } => {
                let current = self
                    .apps
                    .get(app)
                    .map_err(|_| Rejection::UnknownEntity(format!("app `{app}`")))?
                    .bitrate();
                if current == *bitrate {
                    return Err(Rejection::NoOp(format!("`{app}` already at {bitrate} b/s")));
                }
                self.apps
                    .set_bitrate(app, *bitrate)
                    .map_err(|e| Rejection::Invalid(e.to_string()))
            }
            ControlAction::SetChannelError { waveform, per } => {
                self.check_waveform(waveform)?;
                let current = self.radio.get(waveform).map(|i| i.config.channel_per).ok();
                if current == Some(*per) {
                    return Err(Rejection::NoOp(format!(
                        "{waveform} channel PER already {per}"
                    )));
                }
                self.radio
                    .inject_channel_error(waveform, *per)
                    .map_err(|e| Rejection::Invalid(e.to_string()))
            }
        }
    }
}

impl MetricSource for Plant {
    fn is_active(&self, app: &AppId) -> bool {
        self.apps.get(app).is_ok_and(|a| {
            a.is_running() && self.now() >= a.started_at + self.apps.instantiation_latency()
        })
    }

    fn app_metric(&self, app: &AppId, metric: Metric, window: SimTime) -> Option<f64> {
        let now = self.now();
        let instance = self.apps.get(app).ok()?;
        let waveform = || {
            let label = self.flow_waveform(instance.flow())?;
            self.radio.waveform(label, Direction::Down).ok()
        };
        match (metric, &instance.spec) {
            (Metric::RttMax, _) => instance.kpis.rtt_max(now, window),
            (Metric::RttMean, _) => instance.kpis.rtt_mean(now, window),
            (Metric::SuccessRate, AppSpec::SmsClient { .. }) => {
                instance.kpis.success_rate(now, window)
            }
            (Metric::SuccessRate, _) => waveform()?
                .flow_window(now, window, instance.flow())
                .success_rate(),
            (Metric::WaveformLoad, _) => Some(waveform()?.sample_kpis(now, window).load),
        }
    }
}

/// Receives the node's telemetry as it is produced.
pub trait Observer: Send {
    fn on_tick(&mut self, _time: SimTime, _batch: &[KpiSample], _report: &SlaReport) {}
    fn on_action(&mut self, _entry: &ActionLogEntry) {}
    fn on_run_state(&mut self, _time: SimTime, _state: &RunState) {}
    fn on_reply(&mut self, _tag: u64, _reply: &Reply) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub clock: ClockState,
    pub pace: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSnapshot {
    pub kpis: RadioKpis,
    pub flows: BTreeMap<FlowId, FlowCounters>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformSnapshot {
    pub label: String,
    pub raw_capacity: f64,
    pub code_rate: crate::radio::CodeRate,
    pub effective_capacity: f64,
    pub channel_per: f64,
    pub correction_threshold: f64,
    pub residual_per: f64,
    pub down: DirectionSnapshot,
    pub up: DirectionSnapshot,
}

#[derive(Debug, Clone, Serialize)]
pub struct SwitchSnapshot {
    pub name: String,
    pub ports: Vec<Port>,
    pub rules: Vec<InstalledRule>,
    pub port_counters: BTreeMap<PortId, PortCounters>,
    pub default_drops: u64,
    pub hop_drops: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AppSnapshot {
    pub id: AppId,
    pub spec: AppSpec,
    pub side: Side,
    pub port: PortId,
    pub state: AppState,
    pub bitrate: f64,
    pub kpis: AppKpis,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowPlacement {
    pub flow: FlowId,
    pub waveform: String,
    pub transcoder: Option<AppId>,
}

/// Full state document, captured between two events.
#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub time: SimTime,
    pub run_state: RunState,
    pub mode: Mode,
    pub waveforms: Vec<WaveformSnapshot>,
    pub switches: Vec<SwitchSnapshot>,
    pub apps: Vec<AppSnapshot>,
    pub flows: Vec<FlowPlacement>,
    pub sink: BTreeMap<FlowId, SinkStats>,
    pub sla: Option<SlaReport>,
    pub actions: Vec<ActionLogEntry>,
}

#[derive(Debug)]
pub enum Command {
    Submit {
        action: ControlAction,
        operator: String,
    },
    Pause,
    Resume,
    SetPace(f64),
    Snapshot,
    Stop,
}

#[derive(Debug)]
pub enum Reply {
    Ack(Result<(), String>),
    Snapshot(Box<Snapshot>),
}

/// A command plus where to send its reply. A tagged request also has its
/// reply passed to every observer through [`Observer::on_reply`].
#[derive(Debug)]
pub struct Request {
    pub command: Command,
    pub reply: Option<Sender<Reply>>,
    pub tag: Option<u64>,
}

impl Request {
    pub fn new(command: Command) -> (Self, Receiver<Reply>) {
        let (tx, rx) = crossbeam_channel::bounded(1);
        (
            Self {
                command,
                reply: Some(tx),
                tag: None,
            },
            rx,
        )
    }

    pub fn tagged(command: Command, tag: u64) -> Self {
        Self {
            command,
            reply: None,
            tag: Some(tag),
        }
    }
}

pub struct Node {
    plant: Plant,
    telemetry: Telemetry,
    controller: Controller,
    script: ScenarioScript,
    observers: Vec<Box<dyn Observer>>,
    notified_actions: usize,
    run_log: Option<RunLog>,
    finished: bool,
    clock: ClockState,
    pace: f64,
}

impl Node {
    pub fn new(script: &ScenarioScript) -> Result<Self, NodeError> {
        let mut plant = Plant::new(script)?;
        let mut telemetry = Telemetry::new(script.tick);
        for sla in &script.slas {
            let launch = script
                .apps
                .iter()
                .find(|a| a.id == sla.app)
                .ok_or_else(|| NodeError::Config(format!("SLA for unknown app `{}`", sla.app)))?;
            telemetry.register(sla.clone(), &launch.spec)?;
        }
        for (i, launch) in script.apps.iter().enumerate() {
            plant.sched.schedule(launch.time, Event::Launch(i))?;
        }
        for (i, e) in script.errors.iter().enumerate() {
            plant.sched.schedule(e.time, Event::ChannelError(i))?;
        }
        if script.mode.runs_script() {
            for (i, a) in script.actions.iter().enumerate() {
                plant.sched.schedule(a.time, Event::Scripted(i))?;
            }
        }
        if script.tick <= script.duration {
            plant.sched.schedule(script.tick, Event::Tick(1))?;
        }
        Ok(Self {
            plant,
            telemetry,
            controller: Controller::new(script.mode),
            script: script.clone(),
            observers: Vec::new(),
            notified_actions: 0,
            run_log: None,
            finished: false,
            clock: ClockState::Running,
            pace: 0.0,
        })
    }

    pub fn add_observer(&mut self, observer: Box<dyn Observer>) {
        self.observers.push(observer);
    }

    /// Keeps an ordered `(time, sequence)` record of every dispatched event.
    pub fn record_events(&mut self) {
        self.run_log.get_or_insert_with(RunLog::default);
    }

    pub fn run_log(&self) -> Option<&RunLog> {
        self.run_log.as_ref()
    }

    pub fn now(&self) -> SimTime {
        self.plant.now()
    }

    pub fn duration(&self) -> SimTime {
        self.script.duration
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn plant_mut(&mut self) -> &mut Plant {
        &mut self.plant
    }

    pub fn telemetry(&self) -> &Telemetry {
        &self.telemetry
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn script(&self) -> &ScenarioScript {
        &self.script
    }

    pub fn into_parts(self) -> (Plant, Telemetry, Controller) {
        (self.plant, self.telemetry, self.controller)
    }

    pub fn submit(&mut self, action: ControlAction, operator: &str) -> Result<(), Rejection> {
        let now = self.now();
        let result = self
            .controller
            .submit_manual(&mut self.plant, now, action, operator);
        self.flush_actions();
        result
    }

    fn flush_actions(&mut self) {
        let log = self.controller.log();
        for entry in &log[self.notified_actions..] {
            for o in &mut self.observers {
                o.on_action(entry);
            }
        }
        self.notified_actions = log.len();
    }

    fn dispatch(&mut self, event: Event) -> Result<(), NodeError> {
        match event {
            Event::Tick(k) => self.on_tick(k),
            Event::Launch(i) => {
                let launch = self.script.apps[i].clone();
                self.plant.launch(&launch)
            }
            Event::Emission(id) => self.plant.on_emission(id),
            Event::SmsTimeout { app, seq } => {
                let now = self.now();
                self.plant.apps.on_timeout(now, &app, seq)?;
                Ok(())
            }
            Event::Departure { label, dir } => self.plant.on_departure(label, dir),
            Event::Arrival { label, dir, packet } => {
                let side = receiving_side(dir);
                let port = self.plant.radio_ports[&(side, label)];
                self.plant.forward(side, port, packet);
                Ok(())
            }
            Event::ChannelError(i) => {
                let e = &self.script.errors[i];
                self.plant
                    .radio
                    .inject_channel_error(&e.waveform, e.channel_per)?;
                Ok(())
            }
            Event::Scripted(i) => {
                let now = self.now();
                let action = self.script.actions[i].action.clone();
                let _ = self.controller.apply(
                    &mut self.plant,
                    now,
                    action,
                    crate::controller::Initiator::operator("script"),
                );
                self.flush_actions();
                Ok(())
            }
        }
    }

    fn on_tick(&mut self, k: u64) -> Result<(), NodeError> {
        let now = self.now();
        let period = self.telemetry.tick_period();
        let batch = self.plant.kpi_batch(period);
        self.telemetry.record(batch.clone());
        self.plant.update_link_estimates();
        let report = self.telemetry.evaluate_slas(now, &self.plant).clone();
        if self.controller.mode().runs_policy() {
            let input = PolicyInput {
                time: now,
                report: &report,
                links: self.plant.link_views(),
                flows: self.plant.flow_views(&self.telemetry),
                load_bound: self.controller.load_bound(),
            };
            self.controller.policy_step(&mut self.plant, &input);
            self.flush_actions();
        }
        for o in &mut self.observers {
            o.on_tick(now, &batch, &report);
        }
        self.plant.radio.prune(now);
        let next = (k + 1) as f64 * period;
        if next <= self.script.duration + 1e-9 {
            self.plant.sched.schedule(next, Event::Tick(k + 1))?;
        }
        Ok(())
    }

    /// Dispatches the next event due at or before `t_end`.
    fn step(&mut self, t_end: SimTime) -> Result<bool, NodeError> {
        let Some(ev) = self.plant.sched.pop_until(t_end) else {
            return Ok(false);
        };
        if let Some(log) = &mut self.run_log {
            log.push(ev.fire_time, ev.sequence);
        }
        self.dispatch(ev.payload)?;
        Ok(true)
    }

    /// Runs as fast as possible up to `t_end` (clamped to the duration).
    pub fn run_until(&mut self, t_end: SimTime) -> Result<(), NodeError> {
        let t_end = t_end.min(self.script.duration);
        if t_end < self.now() {
            return Err(EngineError::PastEnd {
                t_end,
                now: self.now(),
            }
            .into());
        }
        while self.step(t_end)? {}
        self.plant.sched.advance_to(t_end);
        if t_end >= self.script.duration {
            self.finish();
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), NodeError> {
        self.run_until(self.script.duration)
    }

    fn finish(&mut self) {
        if !self.finished {
            self.finished = true;
            self.notify_run_state();
        }
    }

    pub fn run_state(&self) -> RunState {
        RunState {
            clock: self.clock,
            pace: self.pace,
            finished: self.finished,
        }
    }

    fn notify_run_state(&mut self) {
        let now = self.now();
        let state = self.run_state();
        for o in &mut self.observers {
            o.on_run_state(now, &state);
        }
    }

    /// Handles one command. Returns `false` on `Stop`.
    fn handle(&mut self, request: Request, pacer: &mut Pacer) -> bool {
        let now = self.now();
        let mut state_changed = false;
        let mut keep_running = true;
        let reply = match request.command {
            Command::Submit { action, operator } => Reply::Ack(
                self.controller
                    .submit_manual(&mut self.plant, now, action, &operator)
                    .map_err(|r| r.to_string()),
            ),
            Command::Pause => {
                pacer.pause();
                self.clock = ClockState::Paused;
                state_changed = true;
                Reply::Ack(Ok(()))
            }
            Command::Resume => {
                pacer.resume(now);
                self.clock = ClockState::Running;
                state_changed = true;
                Reply::Ack(Ok(()))
            }
            Command::SetPace(p) if p.is_finite() && p >= 0.0 => {
                pacer.set_pace(p, now);
                self.pace = p;
                state_changed = true;
                Reply::Ack(Ok(()))
            }
            Command::SetPace(p) => Reply::Ack(Err(format!("invalid pace {p}"))),
            Command::Snapshot => Reply::Snapshot(Box::new(self.snapshot())),
            Command::Stop => {
                keep_running = false;
                Reply::Ack(Ok(()))
            }
        };
        // the reply goes out before any telemetry showing its effect
        if let Some(tag) = request.tag {
            for o in &mut self.observers {
                o.on_reply(tag, &reply);
            }
        }
        if let Some(tx) = request.reply {
            let _ = tx.send(reply);
        }
        self.flush_actions();
        if state_changed {
            self.notify_run_state();
        }
        keep_running
    }

    /// Interactive run: paced against the wall clock, steered through
    /// `commands`. Returns when the run ends, on `Stop`, or when every
    /// command sender is gone while paused.
    pub fn run_interactive(
        &mut self,
        commands: &Receiver<Request>,
        pace: f64,
        start_paused: bool,
    ) -> Result<(), NodeError> {
        let mut pacer = Pacer::new(pace);
        if start_paused {
            pacer.pause();
        }
        self.run_paced(commands, &mut pacer, self.script.duration)
    }

    /// Paced run up to `t_end` with no command source.
    pub fn run_paced_until(&mut self, t_end: SimTime, pace: f64) -> Result<(), NodeError> {
        let (_tx, rx) = crossbeam_channel::bounded(0);
        self.run_paced(&rx, &mut Pacer::new(pace), t_end)
    }

    fn run_paced(
        &mut self,
        commands: &Receiver<Request>,
        pacer: &mut Pacer,
        t_end: SimTime,
    ) -> Result<(), NodeError> {
        let end = t_end.min(self.script.duration);
        pacer.rebase(self.now());
        self.pace = pacer.pace();
        self.clock = pacer.state();
        self.notify_run_state();
        loop {
            while let Ok(req) = commands.try_recv() {
                if !self.handle(req, pacer) {
                    return Ok(());
                }
            }
            if pacer.is_paused() {
                match commands.recv() {
                    Ok(req) => {
                        if !self.handle(req, pacer) {
                            return Ok(());
                        }
                        continue;
                    }
                    Err(_) => return Ok(()),
                }
            }
            let next = self.plant.sched.peek_time().filter(|t| *t <= end);
            let target = next.unwrap_or(end);
            if let Some(wait) = pacer.wait_for(target) {
                match commands.recv_timeout(wait.min(POLL)) {
                    Ok(req) => {
                        if !self.handle(req, pacer) {
                            return Ok(());
                        }
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => {
                        std::thread::sleep(wait.min(POLL));
                    }
                }
                continue;
            }
            if next.is_none() {
                self.plant.sched.advance_to(end);
                if end >= self.script.duration {
                    self.finish();
                }
                return Ok(());
            }
            self.step(end)?;
        }
    }

    /// Answers commands after the run has ended: snapshots still work,
    /// everything else is refused. Returns on `Stop` or disconnection.
    pub fn serve_finished(&mut self, commands: &Receiver<Request>) {
        while let Ok(request) = commands.recv() {
            let stop = matches!(request.command, Command::Stop);
            let reply = match request.command {
                Command::Snapshot => Reply::Snapshot(Box::new(self.snapshot())),
                Command::Stop => Reply::Ack(Ok(())),
                _ => Reply::Ack(Err("run finished".into())),
            };
            if let Some(tag) = request.tag {
                for o in &mut self.observers {
                    o.on_reply(tag, &reply);
                }
            }
            if let Some(tx) = request.reply {
                let _ = tx.send(reply);
            }
            if stop {
                return;
            }
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        let now = self.now();
        let w = self.plant.kpi_window;
        let dir = |wf: &crate::radio::Waveform| DirectionSnapshot {
            kpis: wf.sample_kpis(now.max(f64::MIN_POSITIVE), w),
            flows: wf.flow_counters().clone(),
        };
        let waveforms = self
            .plant
            .radio
            .interfaces()
            .iter()
            .map(|i| WaveformSnapshot {
                label: i.label().to_string(),
                raw_capacity: i.config.raw_capacity,
                code_rate: i.code_rate(),
                effective_capacity: i.effective_capacity(),
                channel_per: i.config.channel_per,
                correction_threshold: i.config.correction_threshold,
                residual_per: i.down.residual_per(),
                down: dir(&i.down),
                up: dir(&i.up),
            })
            .collect();
        let switches = [&self.plant.mec, &self.plant.ue]
            .into_iter()
            .map(|s| SwitchSnapshot {
                name: s.name().to_string(),
                ports: s.ports().cloned().collect(),
                rules: s.rules().to_vec(),
                port_counters: s.port_counters().clone(),
                default_drops: s.default_drops(),
                hop_drops: s.hop_drops(),
            })
            .collect();
        let apps = self
            .plant
            .apps
            .apps()
            .map(|a| AppSnapshot {
                id: a.id.clone(),
                spec: a.spec.clone(),
                side: a.side,
                port: a.port,
                state: a.state,
                bitrate: a.bitrate(),
                kpis: a.kpis.clone(),
            })
            .collect();
        let flows = self
            .plant
            .flows
            .iter()
            .map(|(f, p)| FlowPlacement {
                flow: f.clone(),
                waveform: p.waveform.clone(),
                transcoder: p.transcoder.clone(),
            })
            .collect();
        Snapshot {
            time: now,
            run_state: self.run_state(),
            mode: self.controller.mode(),
            waveforms,
            switches,
            apps,
            flows,
            sink: self.plant.sink_stats.clone(),
            sla: self.telemetry.latest_report().cloned(),
            actions: self.controller.log().to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::builtin;
    use std::sync::{Arc, Mutex};

    #[derive(Default)]
    struct Recorder {
        events: Arc<Mutex<Vec<String>>>,
    }

    impl Observer for Recorder {
        fn on_tick(&mut self, time: SimTime, _: &[KpiSample], _: &SlaReport) {
            self.events.lock().unwrap().push(format!("tick {time}"));
        }
        fn on_action(&mut self, entry: &ActionLogEntry) {
            self.events
                .lock()
                .unwrap()
                .push(format!("action {}", entry.action));
        }
        fn on_run_state(&mut self, _: SimTime, state: &RunState) {
            self.events
                .lock()
                .unwrap()
                .push(format!("state {:?}", state.clock));
        }
        fn on_reply(&mut self, tag: u64, _: &Reply) {
            self.events.lock().unwrap().push(format!("reply {tag}"));
        }
    }

    fn move_video2() -> ControlAction {
        ControlAction::MoveFlow {
            flow: FlowId::new("video2"),
            waveform: "HR".into(),
        }
    }

    #[test]
    fn rejected_actions_are_logged() {
        let mut node = Node::new(&builtin("scenario-1").unwrap()).unwrap();
        node.run_until(10.0).unwrap();
        // video2 has not started yet
        assert!(matches!(
            node.submit(move_video2(), "op"),
            Err(Rejection::UnknownEntity(_))
        ));
        node.run_until(160.0).unwrap();
        node.submit(move_video2(), "op").unwrap();
        assert!(matches!(
            node.submit(move_video2(), "op"),
            Err(Rejection::NoOp(_))
        ));
        let log = node.controller().log();
        assert_eq!(log.len(), 3);
        assert_eq!(log.iter().filter(|e| e.applied()).count(), 1);
        assert_eq!(
            node.plant().flow_waveform(&FlowId::new("video2")),
            Some("HR")
        );
    }

    #[test]
    fn automated_mode_refuses_operator() {
        let script = builtin("scenario-1")
            .unwrap()
            .with_overrides(crate::scenario::Overrides {
                mode: Some(Mode::Automated),
                seed: None,
            });
        let mut node = Node::new(&script).unwrap();
        node.run_until(160.0).unwrap();
        let before = node.controller().log().len();
        assert!(matches!(
            node.submit(move_video2(), "op"),
            Err(Rejection::Mode(_))
        ));
        assert_eq!(node.controller().log().len(), before);
    }

    #[test]
    fn interactive_commands_and_reply_ordering() {
        let mut node = Node::new(&builtin("scenario-1").unwrap()).unwrap();
        let rec = Recorder::default();
        let events = rec.events.clone();
        node.add_observer(Box::new(rec));
        let (tx, rx) = crossbeam_channel::unbounded();
        let worker = std::thread::spawn(move || {
            node.run_interactive(&rx, 0.0, true).unwrap();
            node
        });
        let (req, snap) = Request::new(Command::Snapshot);
        tx.send(req).unwrap();
        match snap.recv().unwrap() {
            Reply::Snapshot(s) => {
                assert_eq!(s.time, 0.0);
                assert_eq!(s.run_state.clock, ClockState::Paused);
            }
            other => panic!("{other:?}"),
        }
        tx.send(Request::tagged(Command::SetPace(-1.0), 7)).unwrap();
        tx.send(Request::tagged(Command::Resume, 8)).unwrap();
        drop(tx);
        let node = worker.join().unwrap();
        assert!(node.is_finished());
        assert_eq!(node.telemetry().ticks(), 300);
        let events = events.lock().unwrap();
        let pos = |s: &str| events.iter().position(|e| e == s).unwrap();
        assert!(pos("reply 8") < pos("state Running"));
        assert!(pos("reply 7") < pos("reply 8"));
        let actions: Vec<_> = events.iter().filter(|e| e.starts_with("action")).collect();
        assert_eq!(actions.len(), 2);
    }

    #[test]
    fn transcoder_chain_rules() {
        let mut node = Node::new(&builtin("scenario-1").unwrap()).unwrap();
        node.run_until(30.0).unwrap();
        let insert = ControlAction::InsertTranscoder {
            flow: FlowId::new("video1"),
            target_bitrate: 600_000.0,
        };
        node.submit(insert.clone(), "op").unwrap();
        assert!(matches!(
            node.submit(insert, "op"),
            Err(Rejection::Invalid(_))
        ));
        let mec = node.plant().switch(Side::Mec);
        let tc = node
            .plant()
            .flow_transcoder(&FlowId::new("video1"))
            .unwrap()
            .clone();
        let tc_port = node.plant().apps().get(&tc).unwrap().port;
        let chain: Vec<_> = mec
            .rules()
            .iter()
            .filter(|r| r.rule.matches.flow.as_ref() == Some(&FlowId::new("video1")))
            .collect();
        assert_eq!(chain.len(), 2);
        assert!(chain
            .iter()
            .any(|r| r.rule.actions == vec![Action::SetDst(tc_port), Action::Output(tc_port)]));
        node.run_until(60.0).unwrap();
        node.submit(
            ControlAction::RemoveTranscoder {
                flow: FlowId::new("video1"),
            },
            "op",
        )
        .unwrap();
        assert!(node
            .plant()
            .flow_transcoder(&FlowId::new("video1"))
            .is_none());
        node.run_until(70.0).unwrap();
        assert_eq!(node.plant().switch(Side::Mec).default_drops(), 0);
    }
}
