//! Scenario files: loading, validation, batch runs and report export.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apps::{AppId, AppSpec, Side};
use crate::controller::{ActionLogEntry, ControlAction, Mode};
use crate::engine::SimTime;
use crate::node::{Node, NodeError, SinkStats};
use crate::radio::{FlowCounters, FlowId, WaveformConfig};
use crate::switch::InstalledRule;
use crate::telemetry::{validate_sla, SlaReport, SlaSpec, Telemetry, DEFAULT_TICK};

pub const SCENARIO_1: &str = include_str!("../scenarios/scenario-1.toml");
pub const SCENARIO_2: &str = include_str!("../scenarios/scenario-2.toml");

/// Names accepted by [`builtin`].
pub const BUILTINS: [&str; 2] = ["scenario-1", "scenario-2"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{entry}: {message}")]
    Semantic { entry: String, message: String },
    #[error("unknown built-in scenario `{0}`")]
    UnknownBuiltin(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

fn semantic(entry: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Semantic {
        entry: entry.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppLaunch {
    pub time: SimTime,
    pub id: AppId,
    #[serde(default)]
    pub side: Side,
    /// Required for everything except transcoders.
    #[serde(default)]
    pub waveform: Option<String>,
    #[serde(flatten)]
    pub spec: AppSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorEntry {
    pub time: SimTime,
    pub waveform: String,
    pub channel_per: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedAction {
    pub time: SimTime,
    #[serde(flatten)]
    pub action: ControlAction,
}

fn default_tick() -> SimTime {
    DEFAULT_TICK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration: SimTime,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_tick")]
    pub tick: SimTime,
    pub waveforms: Vec<WaveformConfig>,
    #[serde(default)]
    pub apps: Vec<AppLaunch>,
    #[serde(default)]
    pub errors: Vec<ErrorEntry>,
    #[serde(default)]
    pub slas: Vec<SlaSpec>,
    #[serde(default)]
    pub actions: Vec<ScriptedAction>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

impl ScenarioScript {
    /// Parses and validates scenario text.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let script: ScenarioScript = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            ScenarioError::Parse {
                line,
                column,
                message: e.message().trim().to_string(),
            }
        })?;
        script.validate()?;
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Built-in name or a file path.
    pub fn resolve(name_or_path: &str) -> Result<Self, ScenarioError> {
        match builtin(name_or_path) {
            Ok(s) => Ok(s),
            Err(ScenarioError::UnknownBuiltin(_)) if Path::new(name_or_path).exists() => {
                Self::load(Path::new(name_or_path))
            }
            Err(e) => Err(e),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario scripts always serialize")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(semantic("duration", "must be positive"));
        }
        if !(self.tick.is_finite() && self.tick > 0.0) {
            return Err(semantic("tick", "must be positive"));
        }
        let check_time = |entry: &str, t: SimTime| {
            if !(t.is_finite() && t >= 0.0) {
                Err(semantic(entry, format!("time {t} is negative")))
            } else if t >= self.duration {
                Err(semantic(
                    entry,
                    format!("time {t} is not before the duration {}", self.duration),
                ))
            } else {
                Ok(())
            }
        };

        let mut labels = BTreeSet::new();
        for w in &self.waveforms {
            let entry = format!("waveform `{}`", w.label);
            w.validate().map_err(|e| semantic(&entry, e.to_string()))?;
            if !labels.insert(w.label.as_str()) {
                return Err(semantic(entry, "label defined twice"));
            }
        }
        let known = |entry: &str, label: &str| {
            if labels.contains(label) {
                Ok(())
            } else {
                Err(semantic(entry, format!("unknown waveform `{label}`")))
            }
        };

        let mut launched: BTreeMap<&AppId, &AppLaunch> = BTreeMap::new();
        let mut flow_waveform: BTreeMap<&FlowId, &str> = BTreeMap::new();
        for app in &self.apps {
            let entry = format!("app `{}`", app.id);
            check_time(&entry, app.time)?;
            if launched.contains_key(&app.id) {
                return Err(semantic(entry, "id used twice"));
            }
            let waveform = match (&app.spec, &app.waveform) {
                (AppSpec::Transcoder { .. }, _) => {
                    return Err(semantic(
                        entry,
                        "transcoders are inserted by actions, not scheduled",
                    ))
                }
                (_, None) => return Err(semantic(entry, "missing `waveform`")),
                (_, Some(w)) => w.as_str(),
            };
            known(&entry, waveform)?;
            match &app.spec {
                AppSpec::VideoServer { bitrate, .. } => {
                    if app.side != Side::Mec {
                        return Err(semantic(entry, "video servers run on the mec side"));
                    }
                    if !(bitrate.is_finite() && *bitrate > 0.0) {
                        return Err(semantic(entry, "bitrate must be positive"));
                    }
                }
                AppSpec::SmsClient { server, flow, .. } => {
                    let Some(srv) = launched.get(server) else {
                        return Err(semantic(
                            entry,
                            format!("server `{server}` must be listed before its client"),
                        ));
                    };
                    if !matches!(srv.spec, AppSpec::SmsServer { .. }) {
                        return Err(semantic(entry, format!("`{server}` is not an sms server")));
                    }
                    if srv.time > app.time {
                        return Err(semantic(entry, format!("starts before server `{server}`")));
                    }
                    if srv.side == app.side {
                        return Err(semantic(
                            entry,
                            "client and server must be on opposite sides",
                        ));
                    }
                    if srv.spec.flow() != flow {
                        return Err(semantic(entry, "client and server must share a flow"));
                    }
                }
                _ => {}
            }
            match flow_waveform.get(app.spec.flow()) {
                Some(w) if *w != waveform => {
                    return Err(semantic(
                        entry,
                        format!("flow `{}` is already placed on {w}", app.spec.flow()),
                    ))
                }
                _ => {
                    flow_waveform.insert(app.spec.flow(), waveform);
                }
            }
            launched.insert(&app.id, app);
        }
        let video_flows: BTreeSet<&FlowId> = self
            .apps
            .iter()
            .filter(|a| matches!(a.spec, AppSpec::VideoServer { .. }))
            .map(|a| a.spec.flow())
            .collect();
        let sources: BTreeMap<&FlowId, SimTime> = self
            .apps
            .iter()
            .filter(|a| !matches!(a.spec, AppSpec::SmsServer { .. }))
            .map(|a| (a.spec.flow(), a.time))
            .collect();

        for (i, e) in self.errors.iter().enumerate() {
            let entry = format!("errors[{i}]");
            check_time(&entry, e.time)?;
            known(&entry, &e.waveform)?;
            if !(0.0..=1.0).contains(&e.channel_per) {
                return Err(semantic(entry, "channel_per must lie in [0, 1]"));
            }
        }

        let mut sla_apps = BTreeSet::new();
        for sla in &self.slas {
            let entry = format!("sla for `{}`", sla.app);
            let Some(app) = launched.get(&sla.app) else {
                return Err(semantic(entry, "unknown app"));
            };
            if !sla_apps.insert(&sla.app) {
                return Err(semantic(entry, "app has two SLAs"));
            }
            validate_sla(sla, &app.spec).map_err(|e| semantic(&entry, e.to_string()))?;
        }

        for (i, a) in self.actions.iter().enumerate() {
            let entry = format!("actions[{i}] {}", a.action);
            check_time(&entry, a.time)?;
            let flow_started = |flow: &FlowId| match sources.get(flow) {
                None => Err(semantic(&entry, format!("flow `{flow}` never starts"))),
                Some(t) if *t >= a.time => Err(semantic(
                    &entry,
                    format!("flow `{flow}` only starts at t={t}"),
                )),
                Some(_) => Ok(()),
            };
            match &a.action {
                ControlAction::MoveFlow { flow, waveform } => {
                    known(&entry, waveform)?;
                    flow_started(flow)?;
                }
                ControlAction::SetCodeRate { waveform, .. } => known(&entry, waveform)?,
                ControlAction::SetChannelError { waveform, per } => {
                    known(&entry, waveform)?;
                    if !(0.0..=1.0).contains(per) {
                        return Err(semantic(entry, "per must lie in [0, 1]"));
                    }
                }
                ControlAction::InsertTranscoder {
                    flow,
                    target_bitrate,
                } => {
                    flow_started(flow)?;
                    if !video_flows.contains(flow) {
                        return Err(semantic(entry, format!("`{flow}` is not a video flow")));
                    }
                    if !(target_bitrate.is_finite() && *target_bitrate > 0.0) {
                        return Err(semantic(entry, "target bitrate must be positive"));
                    }
                }
                ControlAction::RemoveTranscoder { flow } => flow_started(flow)?,
                ControlAction::SetAppBitrate { app, bitrate } => {
                    match launched.get(app) {
                        None => return Err(semantic(entry, format!("app `{app}` never starts"))),
                        Some(l) if l.time >= a.time => {
                            return Err(semantic(
                                entry,
                                format!("app `{app}` only starts at t={}", l.time),
                            ))
                        }
                        Some(_) => {}
                    }
                    if !(bitrate.is_finite() && *bitrate > 0.0) {
                        return Err(semantic(entry, "bitrate must be positive"));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn builtin(name: &str) -> Result<ScenarioScript, ScenarioError> {
    let text = match name {
        "scenario-1" | "1" => SCENARIO_1,
        "scenario-2" | "2" => SCENARIO_2,
        _ => return Err(ScenarioError::UnknownBuiltin(name.to_string())),
    };
    ScenarioScript::parse(text)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
}

impl ScenarioScript {
    pub fn with_overrides(mut self, overrides: Overrides) -> Self {
        if let Some(m) = overrides.mode {
            self.mode = m;
        }
        if let Some(s) = overrides.seed {
            self.seed = s;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformSummary {
    pub label: String,
    pub down: FlowCounters,
    pub up: FlowCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub flow: FlowId,
    pub waveform: String,
    pub transcoded: bool,
    /// Radio counters summed over every waveform and direction.
    pub radio: FlowCounters,
    pub sink: SinkStats,
    pub switch_default_drops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub mode: Mode,
    pub duration: SimTime,
    pub ticks: u64,
    pub final_fraction_satisfied: Option<f64>,
    pub violated_ticks: u64,
    pub actions_applied: usize,
    pub actions_rejected: usize,
    pub flows: Vec<FlowSummary>,
    pub waveforms: Vec<WaveformSummary>,
}

#[derive(Debug, Serialize)]
pub struct SwitchRules {
    pub name: String,
    pub rules: Vec<InstalledRule>,
    pub default_drops: u64,
    pub hop_drops: u64,
}

pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub mode: Mode,
    pub telemetry: Telemetry,
    pub actions: Vec<ActionLogEntry>,
    pub final_report: Option<SlaReport>,
    pub summary: RunSummary,
    pub switches: Vec<SwitchRules>,
}

fn add_counters(acc: &mut FlowCounters, c: &FlowCounters) {
    acc.offered += c.offered;
    acc.delivered += c.delivered;
    acc.dropped_queue_full += c.dropped_queue_full;
    acc.dropped_channel += c.dropped_channel;
    acc.in_queue += c.in_queue;
}

impl RunReport {
    /// Collects the report from a node that has run to completion.
    pub fn from_node(node: Node) -> Self {
        let script = node.script().clone();
        let plant = node.plant();
        let mut waveforms = Vec::new();
        let mut per_flow: BTreeMap<FlowId, FlowCounters> = BTreeMap::new();
        for iface in plant.radio().interfaces() {
            for wf in [&iface.down, &iface.up] {
                for (flow, c) in wf.flow_counters() {
                    add_counters(per_flow.entry(flow.clone()).or_default(), c);
                }
            }
            waveforms.push(WaveformSummary {
                label: iface.label().to_string(),
                down: iface.down.totals(),
                up: iface.up.totals(),
            });
        }
        let flows = per_flow
            .into_iter()
            .map(|(flow, radio)| FlowSummary {
                waveform: plant.flow_waveform(&flow).unwrap_or_default().to_string(),
                transcoded: plant.flow_transcoder(&flow).is_some(),
                sink: plant.sink_stats().get(&flow).copied().unwrap_or_default(),
                switch_default_drops: plant.switch(Side::Mec).flow_default_drops(&flow)
                    + plant.switch(Side::Ue).flow_default_drops(&flow),
                radio,
                flow,
            })
            .collect();
        let switches = [Side::Mec, Side::Ue]
            .into_iter()
            .map(|s| {
                let sw = plant.switch(s);
                SwitchRules {
                    name: sw.name().to_string(),
                    rules: sw.rules().to_vec(),
                    default_drops: sw.default_drops(),
                    hop_drops: sw.hop_drops(),
                }
            })
            .collect();
        let (_, telemetry, controller) = node.into_parts();
        let actions = controller.log().to_vec();
        let final_report = telemetry.latest_report().cloned();
        let summary = RunSummary {
            scenario: script.name.clone(),
            seed: script.seed,
            mode: script.mode,
            duration: script.duration,
            ticks: telemetry.ticks(),
            final_fraction_satisfied: final_report.as_ref().and_then(|r| r.fraction_satisfied),
            violated_ticks: telemetry
                .reports()
                .iter()
                .filter(|r| r.violated > 0)
                .count() as u64,
            actions_applied: actions.iter().filter(|a| a.applied()).count(),
            actions_rejected: actions.iter().filter(|a| !a.applied()).count(),
            flows,
            waveforms,
        };
        Self {
            scenario: script.name,
            seed: script.seed,
            mode: script.mode,
            telemetry,
            actions,
            final_report,
            summary,
            switches,
        }
    }

    pub fn final_fraction(&self) -> Option<f64> {
        self.summary.final_fraction_satisfied
    }

    /// Rendered `(file name, contents)` pairs written by [`RunReport::export`].
    pub fn render(&self) -> Result<Vec<(String, String)>, ScenarioError> {
        let mut files: Vec<(String, String)> = self
            .telemetry
            .render_trace()
            .into_iter()
            .map(|(n, c)| (n.to_string(), c))
            .collect();
        files.push(("actions.json".into(), to_json(&self.actions)?));
        files.push(("summary.json".into(), to_json(&self.summary)?));
        files.push(("switch_rules.json".into(), to_json(&self.switches)?));
        files.push((
            "sla_reports.json".into(),
            to_json(self.telemetry.reports())?,
        ));
        Ok(files)
    }

    pub fn export(&self, dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
        let io = |source| ScenarioError::Io {
            path: dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut written = Vec::new();
        for (name, contents) in self.render()? {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|source| ScenarioError::Io {
                path: path.clone(),
                source,
            })?;
            written.push(path);
        }
        Ok(written)
    }
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String, serde_json::Error> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Runs a script to completion as fast as possible.
pub fn run(script: &ScenarioScript, overrides: Overrides) -> Result<RunReport, ScenarioError> {
    let script = script.clone().with_overrides(overrides);
    script.validate()?;
    let mut node = Node::new(&script)?;
    node.run()?;
    Ok(RunReport::from_node(node))
}
