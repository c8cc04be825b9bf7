//! MEC controller: control actions, the action log and the rule-based
//! policy engine.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apps::AppId;
use crate::engine::SimTime;
use crate::radio::{CodeRate, FlowId};
use crate::telemetry::{Metric, SlaReport, Verdict, DEFAULT_LOAD_BOUND};

pub const DEFAULT_COOLDOWN: SimTime = 15.0;
/// Transcoder targets are rounded down to this granularity (bits/s).
pub const TRANSCODE_STEP: f64 = 10_000.0;
/// Fraction of the computed room a transcoder target may use.
pub const TRANSCODE_MARGIN: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlAction {
    MoveFlow {
        flow: FlowId,
        waveform: String,
    },
    SetCodeRate {
        waveform: String,
        rate: CodeRate,
    },
    InsertTranscoder {
        flow: FlowId,
        target_bitrate: f64,
    },
    SetAppBitrate {
        app: AppId,
        bitrate: f64,
    },
    RemoveTranscoder {
        flow: FlowId,
    },
    /// Scenario lever; never chosen by the policy engine.
    SetChannelError {
        waveform: String,
        per: f64,
    },
}

impl ControlAction {
    pub fn kind(&self) -> &'static str {
        match self {
            ControlAction::MoveFlow { .. } => "move_flow",
            ControlAction::SetCodeRate { .. } => "set_code_rate",
            ControlAction::InsertTranscoder { .. } => "insert_transcoder",
            ControlAction::SetAppBitrate { .. } => "set_app_bitrate",
            ControlAction::RemoveTranscoder { .. } => "remove_transcoder",
            ControlAction::SetChannelError { .. } => "set_channel_error",
        }
    }
}

impl fmt::Display for ControlAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlAction::MoveFlow { flow, waveform } => write!(f, "MoveFlow({flow}, {waveform})"),
            ControlAction::SetCodeRate { waveform, rate } => {
                write!(f, "SetCodeRate({waveform}, {rate})")
            }
            ControlAction::InsertTranscoder {
                flow,
                target_bitrate,
            } => write!(f, "InsertTranscoder({flow}, {target_bitrate})"),
            ControlAction::SetAppBitrate { app, bitrate } => {
                write!(f, "SetAppBitrate({app}, {bitrate})")
            }
            ControlAction::RemoveTranscoder { flow } => write!(f, "RemoveTranscoder({flow})"),
            ControlAction::SetChannelError { waveform, per } => {
                write!(f, "SetChannelError({waveform}, {per})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Initiator {
    Operator { id: String },
    Policy { rule: String },
}

impl Initiator {
    pub fn operator(id: impl Into<String>) -> Self {
        Initiator::Operator { id: id.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "reason", rename_all = "snake_case")]
pub enum Rejection {
    #[error("unknown entity: {0}")]
    UnknownEntity(String),
    #[error("no-op: {0}")]
    NoOp(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("not accepted in {0} mode")]
    Mode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ActionOutcome {
    Applied,
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionLogEntry {
    pub time: SimTime,
    pub action: ControlAction,
    pub initiator: Initiator,
    pub outcome: ActionOutcome,
}

impl ActionLogEntry {
    pub fn applied(&self) -> bool {
        self.outcome == ActionOutcome::Applied
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Manual,
    Automated,
    #[default]
    Scripted,
    Mixed,
}

impl Mode {
    pub fn runs_policy(self) -> bool {
        matches!(self, Mode::Automated | Mode::Mixed)
    }

    pub fn runs_script(self) -> bool {
        matches!(self, Mode::Scripted | Mode::Mixed)
    }

    pub fn accepts_operator(self) -> bool {
        self != Mode::Automated
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Manual => "manual",
            Mode::Automated => "automated",
            Mode::Scripted => "scripted",
            Mode::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "manual" => Ok(Mode::Manual),
            "automated" => Ok(Mode::Automated),
            "scripted" => Ok(Mode::Scripted),
            "mixed" => Ok(Mode::Mixed),
            other => Err(format!(
                "unknown mode `{other}` (expected manual, automated, scripted or mixed)"
            )),
        }
    }
}

/// The part of the node that actions are applied to.
pub trait Actuator {
    fn execute(&mut self, now: SimTime, action: &ControlAction) -> Result<(), Rejection>;
}

/// Controller view of one waveform (downlink measurements).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkView {
    pub label: String,
    pub effective_capacity: f64,
    pub code_rate: CodeRate,
    pub correction_threshold: f64,
    pub offered_bps: f64,
    /// Residual PER since the last reconfiguration, within the KPI window.
    pub measured_per: Option<f64>,
    /// Most recent PER measurement, kept while the link is idle.
    pub last_known_per: Option<f64>,
}

impl LinkView {
    pub fn headroom(&self, load_bound: f64) -> f64 {
        self.effective_capacity * load_bound - self.offered_bps
    }

    fn reliability(&self) -> f64 {
        self.measured_per.or(self.last_known_per).unwrap_or(0.0)
    }

    /// Channel PER implied by the measurement at the current code rate.
    fn channel_estimate(&self) -> Option<f64> {
        let measured = self.measured_per?;
        Some(match self.code_rate {
            CodeRate::One => measured,
            _ => (measured + self.correction_threshold).min(1.0),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    Video,
    Sms,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowView {
    pub flow: FlowId,
    pub kind: FlowKind,
    pub link: String,
    /// Configured rate on the link in bits/s.
    pub rate: f64,
    pub transcoded: bool,
    /// Tolerated loss, from a success-rate SLA on one of the flow's apps.
    pub tolerance: Option<f64>,
    pub apps: Vec<AppId>,
}

#[derive(Debug, Clone)]
pub struct PolicyInput<'a> {
    pub time: SimTime,
    pub report: &'a SlaReport,
    pub links: Vec<LinkView>,
    pub flows: Vec<FlowView>,
    pub load_bound: f64,
}

impl PolicyInput<'_> {
    fn flows_on<'b>(&'b self, label: &'b str) -> impl Iterator<Item = &'b FlowView> + 'b {
        self.flows.iter().filter(move |f| f.link == label)
    }

    fn flow_has(
        &self,
        flow: &FlowView,
        test: impl Fn(&crate::telemetry::AppVerdict) -> bool,
    ) -> bool {
        flow.apps
            .iter()
            .filter_map(|a| self.report.apps.get(a))
            .any(test)
    }

    fn breached(&self, flow: &FlowView) -> bool {
        self.flow_has(flow, |v| v.verdict == Verdict::Violated)
    }

    fn load_violated(&self, flow: &FlowView) -> bool {
        self.flow_has(flow, |v| v.violated(Metric::WaveformLoad))
    }

    /// Whether `flow` may land on `link` without exceeding its loss tolerance.
    fn reliable_enough(&self, flow: &FlowView, link: &LinkView) -> bool {
        flow.tolerance.is_none_or(|tol| link.reliability() <= tol)
    }

    fn min_tolerance(&self, label: &str) -> Option<(f64, &FlowView)> {
        self.flows
            .iter()
            .filter(|f| f.link == label)
            .filter_map(|f| f.tolerance.map(|t| (t, f)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// SLA breach on a link and another link can absorb a flow.
    MoveToHeadroom,
    /// Residual PER above tolerance and a lower code rate would fix it.
    LowerCodeRate,
    /// Residual PER above tolerance and coding cannot help.
    MoveToReliable,
    /// Load bound violated and nothing can be moved.
    Transcode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub id: String,
    pub kind: RuleKind,
    pub priority: i32,
    pub cooldown: SimTime,
}

pub fn default_rules() -> Vec<PolicyRule> {
    [
        ("R1", RuleKind::MoveToHeadroom, 40),
        ("R2", RuleKind::LowerCodeRate, 30),
        ("R3", RuleKind::MoveToReliable, 20),
        ("R4", RuleKind::Transcode, 10),
    ]
    .into_iter()
    .map(|(id, kind, priority)| PolicyRule {
        id: id.to_string(),
        kind,
        priority,
        cooldown: DEFAULT_COOLDOWN,
    })
    .collect()
}

impl PolicyRule {
    /// The action this rule would take, if its condition holds.
    pub fn evaluate(&self, input: &PolicyInput<'_>) -> Option<ControlAction> {
        match self.kind {
            RuleKind::MoveToHeadroom => move_to_headroom(input),
            RuleKind::LowerCodeRate => lower_code_rate(input),
            RuleKind::MoveToReliable => move_to_reliable(input),
            RuleKind::Transcode => transcode(input),
        }
    }
}

/// A move of one breached link's flow onto the roomiest link that fits it.
fn headroom_move(input: &PolicyInput<'_>, link: &LinkView) -> Option<ControlAction> {
    let mut candidates: Vec<_> = input.flows_on(&link.label).collect();
    candidates.sort_by(|a, b| a.rate.total_cmp(&b.rate).then_with(|| a.flow.cmp(&b.flow)));
    candidates.into_iter().find_map(|flow| {
        input
            .links
            .iter()
            .filter(|l| l.label != link.label)
            .filter(|l| flow.rate <= l.headroom(input.load_bound))
            .filter(|l| input.reliable_enough(flow, l))
            .max_by(|a, b| {
                a.headroom(input.load_bound)
                    .total_cmp(&b.headroom(input.load_bound))
                    .then_with(|| b.label.cmp(&a.label))
            })
            .map(|target| ControlAction::MoveFlow {
                flow: flow.flow.clone(),
                waveform: target.label.clone(),
            })
    })
}

fn breached_links<'a>(input: &'a PolicyInput<'a>) -> impl Iterator<Item = &'a LinkView> + 'a {
    input
        .links
        .iter()
        .filter(move |l| input.flows_on(&l.label).any(|f| input.breached(f)))
}

fn move_to_headroom(input: &PolicyInput<'_>) -> Option<ControlAction> {
    breached_links(input).find_map(|link| headroom_move(input, link))
}

fn lower_code_rate(input: &PolicyInput<'_>) -> Option<ControlAction> {
    input.links.iter().find_map(|link| {
        let (tolerance, _) = input.min_tolerance(&link.label)?;
        let measured = link.measured_per?;
        if measured <= tolerance {
            return None;
        }
        let lower = link.code_rate.lower()?;
        let predicted = lower.residual_per(link.channel_estimate()?, link.correction_threshold);
        (predicted <= tolerance).then(|| ControlAction::SetCodeRate {
            waveform: link.label.clone(),
            rate: lower,
        })
    })
}

fn move_to_reliable(input: &PolicyInput<'_>) -> Option<ControlAction> {
    input.links.iter().find_map(|link| {
        let measured = link.measured_per?;
        let (tolerance, flow) = input.min_tolerance(&link.label)?;
        if measured <= tolerance {
            return None;
        }
        let channel = link.channel_estimate()?;
        let coding_helps = link.code_rate.lower().is_some_and(|lower| {
            let under_provisions = link.effective_capacity * lower.as_f64()
                / link.code_rate.as_f64()
                < input.flows_on(&link.label).map(|f| f.rate).sum::<f64>();
            lower.residual_per(channel, link.correction_threshold) <= tolerance && !under_provisions
        });
        if coding_helps {
            return None;
        }
        input
            .links
            .iter()
            .filter(|l| l.label != link.label)
            .filter(|l| input.reliable_enough(flow, l))
            .min_by(|a, b| {
                a.reliability()
                    .total_cmp(&b.reliability())
                    .then_with(|| {
                        b.headroom(input.load_bound)
                            .total_cmp(&a.headroom(input.load_bound))
                    })
                    .then_with(|| a.label.cmp(&b.label))
            })
            .map(|target| ControlAction::MoveFlow {
                flow: flow.flow.clone(),
                waveform: target.label.clone(),
            })
    })
}

fn transcode(input: &PolicyInput<'_>) -> Option<ControlAction> {
    input.links.iter().find_map(|link| {
        if !input.flows_on(&link.label).any(|f| input.load_violated(f)) {
            return None;
        }
        if headroom_move(input, link).is_some() {
            return None;
        }
        let flow = input
            .flows_on(&link.label)
            .filter(|f| f.kind == FlowKind::Video && !f.transcoded)
            .max_by(|a, b| a.rate.total_cmp(&b.rate).then_with(|| b.flow.cmp(&a.flow)))?;
        let others: f64 = input
            .flows_on(&link.label)
            .filter(|f| f.flow != flow.flow)
            .map(|f| f.rate)
            .sum();
        let room = link.effective_capacity * input.load_bound - others;
        let target = (TRANSCODE_MARGIN * room / TRANSCODE_STEP).floor() * TRANSCODE_STEP;
        (target > 0.0 && target < flow.rate).then(|| ControlAction::InsertTranscoder {
            flow: flow.flow.clone(),
            target_bitrate: target,
        })
    })
}

#[derive(Debug, Clone)]
pub struct Controller {
    mode: Mode,
    rules: Vec<PolicyRule>,
    load_bound: f64,
    last_fired: BTreeMap<String, SimTime>,
    log: Vec<ActionLogEntry>,
}

impl Controller {
    pub fn new(mode: Mode) -> Self {
        Self::with_rules(mode, default_rules())
    }

    pub fn with_rules(mode: Mode, mut rules: Vec<PolicyRule>) -> Self {
        rules.sort_by(|a, b| b.priority.cmp(&a.priority).then_with(|| a.id.cmp(&b.id)));
        Self {
            mode,
            rules,
            load_bound: DEFAULT_LOAD_BOUND,
            last_fired: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rules(&self) -> &[PolicyRule] {
        &self.rules
    }

    pub fn load_bound(&self) -> f64 {
        self.load_bound
    }

    pub fn log(&self) -> &[ActionLogEntry] {
        &self.log
    }

    /// Applies an action and records the outcome.
    pub fn apply(
        &mut self,
        plant: &mut dyn Actuator,
        now: SimTime,
        action: ControlAction,
        initiator: Initiator,
    ) -> Result<(), Rejection> {
        let result = plant.execute(now, &action);
        let outcome = match &result {
            Ok(()) => ActionOutcome::Applied,
            Err(r) => ActionOutcome::Rejected {
                reason: r.to_string(),
            },
        };
        log::debug!("t={now:.3} {action} by {initiator:?}: {outcome:?}");
        self.log.push(ActionLogEntry {
            time: now,
            action,
            initiator,
            outcome,
        });
        result
    }

    /// Operator submission. In mixed mode it also silences every rule for
    /// its cooldown.
    pub fn submit_manual(
        &mut self,
        plant: &mut dyn Actuator,
        now: SimTime,
        action: ControlAction,
        operator: &str,
    ) -> Result<(), Rejection> {
        if !self.mode.accepts_operator() {
            return Err(Rejection::Mode(self.mode.name().to_string()));
        }
        let result = self.apply(plant, now, action, Initiator::operator(operator));
        if result.is_ok() && self.mode == Mode::Mixed {
            for rule in &self.rules {
                self.last_fired.insert(rule.id.clone(), now);
            }
        }
        result
    }

    /// Highest-priority eligible rule and its action. Pure given the
    /// cooldown state.
    pub fn decide(&self, input: &PolicyInput<'_>) -> Option<(String, ControlAction)> {
        if input.report.all_satisfied() {
            return None;
        }
        self.rules
            .iter()
            .filter(|r| {
                self.last_fired
                    .get(&r.id)
                    .is_none_or(|t| input.time - t >= r.cooldown)
            })
            .find_map(|r| r.evaluate(input).map(|a| (r.id.clone(), a)))
    }

    pub fn policy_step(
        &mut self,
        plant: &mut dyn Actuator,
        input: &PolicyInput<'_>,
    ) -> Vec<ControlAction> {
        if !self.mode.runs_policy() {
            return Vec::new();
        }
        let Some((rule, action)) = self.decide(input) else {
            return Vec::new();
        };
        self.last_fired.insert(rule.clone(), input.time);
        let _ = self.apply(
            plant,
            input.time,
            action.clone(),
            Initiator::Policy { rule },
        );
        vec![action]
    }
}
