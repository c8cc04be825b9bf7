//! Flow-rule driven virtual switch.
//!
//! Rules are matched highest priority first. Service chains are built by
//! rules that rewrite the destination header and output to an application
//! port; the application re-injects traffic which a second rule (matching on
//! its ingress port) forwards onward.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::radio::{FlowId, Packet, PortId};

/// A packet that has crossed more switches than this is discarded.
pub const MAX_HOPS: u8 = 8;
pub const DEFAULT_MAX_PORTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleId(pub u64);

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SwitchError {
    #[error("rule {new} overlaps rule {existing} at equal priority {priority}")]
    Overlap {
        new: String,
        existing: RuleId,
        priority: i32,
    },
    #[error("unknown port {0}")]
    UnknownPort(PortId),
    #[error("port {0} already exists")]
    DuplicatePort(PortId),
    #[error("no free port on switch `{0}`")]
    PortExhausted(String),
    #[error("unknown rule {0}")]
    UnknownRule(RuleId),
    #[error("malformed rule: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum PortKind {
    App(String),
    Radio(String),
    /// Terminal consumer of downlink media at the UE.
    Sink,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Port {
    pub id: PortId,
    pub kind: PortKind,
}

/// Match predicate; `None` fields are wildcards.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_port: Option<PortId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dst: Option<PortId>,
}

impl Match {
    pub fn flow(flow: &FlowId) -> Self {
        Self {
            flow: Some(flow.clone()),
            ..Self::default()
        }
    }

    pub fn in_port(mut self, port: PortId) -> Self {
        self.in_port = Some(port);
        self
    }

    pub fn dst(port: PortId) -> Self {
        Self {
            dst: Some(port),
            ..Self::default()
        }
    }

    pub fn matches(&self, in_port: PortId, packet: &Packet) -> bool {
        self.flow.as_ref().is_none_or(|f| f == packet.flow())
            && self.in_port.is_none_or(|p| p == in_port)
            && self.dst.is_none_or(|d| d == packet.headers.dst)
    }

    /// Two matches overlap unless some field is pinned to different values.
    pub fn overlaps(&self, other: &Match) -> bool {
        fn disjoint<T: PartialEq>(a: &Option<T>, b: &Option<T>) -> bool {
            matches!((a, b), (Some(x), Some(y)) if x != y)
        }
        !(disjoint(&self.flow, &other.flow)
            || disjoint(&self.in_port, &other.in_port)
            || disjoint(&self.dst, &other.dst))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    SetDst(PortId),
    SetSrc(PortId),
    SetStage(u8),
    Output(PortId),
    Drop,
}

impl Action {
    fn is_terminal(&self) -> bool {
        matches!(self, Action::Output(_) | Action::Drop)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRule {
    pub priority: i32,
    #[serde(rename = "match")]
    pub matches: Match,
    pub actions: Vec<Action>,
}

impl FlowRule {
    pub fn new(priority: i32, matches: Match, actions: Vec<Action>) -> Self {
        Self {
            priority,
            matches,
            actions,
        }
    }

    pub fn output(priority: i32, matches: Match, port: PortId) -> Self {
        Self::new(priority, matches, vec![Action::Output(port)])
    }

    pub fn terminal(&self) -> Option<&Action> {
        self.actions.last().filter(|a| a.is_terminal())
    }

    pub fn output_port(&self) -> Option<PortId> {
        match self.terminal() {
            Some(Action::Output(p)) => Some(*p),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), SwitchError> {
        match self.actions.iter().filter(|a| a.is_terminal()).count() {
            0 => Err(SwitchError::Malformed("missing output or drop action")),
            1 if self.terminal().is_some() => Ok(()),
            1 => Err(SwitchError::Malformed("terminal action must come last")),
            _ => Err(SwitchError::Malformed("more than one terminal action")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstalledRule {
    pub id: RuleId,
    #[serde(flatten)]
    pub rule: FlowRule,
    pub packets: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortCounters {
    pub rx: u64,
    pub tx: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NoMatch,
    Rule(RuleId),
    HopLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForwardOutcome {
    Output { port: PortId, packet: Packet },
    Dropped(DropReason),
}

#[derive(Debug, Clone, Serialize)]
pub struct Switch {
    name: String,
    max_ports: usize,
    ports: BTreeMap<PortId, Port>,
    rules: Vec<InstalledRule>,
    next_rule: u64,
    port_counters: BTreeMap<PortId, PortCounters>,
    default_drops: u64,
    flow_default_drops: BTreeMap<FlowId, u64>,
    hop_drops: u64,
}

impl Switch {
    pub fn new(name: impl Into<String>) -> Self {
        Self::with_max_ports(name, DEFAULT_MAX_PORTS)
    }

    pub fn with_max_ports(name: impl Into<String>, max_ports: usize) -> Self {
        Self {
            name: name.into(),
            max_ports,
            ports: BTreeMap::new(),
            rules: Vec::new(),
            next_rule: 1,
            port_counters: BTreeMap::new(),
            default_drops: 0,
            flow_default_drops: BTreeMap::new(),
            hop_drops: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn add_port(&mut self, id: PortId, kind: PortKind) -> Result<(), SwitchError> {
        if self.ports.contains_key(&id) {
            return Err(SwitchError::DuplicatePort(id));
        }
        if self.ports.len() >= self.max_ports {
            return Err(SwitchError::PortExhausted(self.name.clone()));
        }
        self.ports.insert(id, Port { id, kind });
        self.port_counters.entry(id).or_default();
        Ok(())
    }

    pub fn remove_port(&mut self, id: PortId) -> Result<Port, SwitchError> {
        self.ports.remove(&id).ok_or(SwitchError::UnknownPort(id))
    }

    pub fn port(&self, id: PortId) -> Option<&Port> {
        self.ports.get(&id)
    }

    pub fn ports(&self) -> impl Iterator<Item = &Port> {
        self.ports.values()
    }

    pub fn port_of(&self, kind: &PortKind) -> Option<PortId> {
        self.ports.values().find(|p| &p.kind == kind).map(|p| p.id)
    }

    pub fn install_rule(&mut self, rule: FlowRule) -> Result<RuleId, SwitchError> {
        rule.validate()?;
        if let Some(port) = rule.output_port() {
            if !self.ports.contains_key(&port) {
                return Err(SwitchError::UnknownPort(port));
            }
        }
        if let Some(existing) = self
            .rules
            .iter()
            .find(|r| r.rule.priority == rule.priority && r.rule.matches.overlaps(&rule.matches))
        {
            return Err(SwitchError::Overlap {
                new: format!("{:?}", rule.matches),
                existing: existing.id,
                priority: rule.priority,
            });
        }
        let id = RuleId(self.next_rule);
        self.next_rule += 1;
        // higher priority first; equal priorities never overlap so their order is moot
        let at = self
            .rules
            .iter()
            .position(|r| r.rule.priority < rule.priority)
            .unwrap_or(self.rules.len());
        self.rules.insert(
            at,
            InstalledRule {
                id,
                rule,
                packets: 0,
                bytes: 0,
            },
        );
        Ok(id)
    }

    pub fn remove_rule(&mut self, id: RuleId) -> Result<FlowRule, SwitchError> {
        let at = self
            .rules
            .iter()
            .position(|r| r.id == id)
            .ok_or(SwitchError::UnknownRule(id))?;
        Ok(self.rules.remove(at).rule)
    }

    pub fn rule(&self, id: RuleId) -> Option<&InstalledRule> {
        self.rules.iter().find(|r| r.id == id)
    }

    /// Installed rules, highest priority first.
    pub fn rules(&self) -> &[InstalledRule] {
        &self.rules
    }

    pub fn lookup(&self, in_port: PortId, packet: &Packet) -> Option<&InstalledRule> {
        self.rules
            .iter()
            .find(|r| r.rule.matches.matches(in_port, packet))
    }

    pub fn forward(&mut self, in_port: PortId, mut packet: Packet) -> ForwardOutcome {
        self.port_counters.entry(in_port).or_default().rx += 1;
        packet.headers.hops = packet.headers.hops.saturating_add(1);
        if packet.headers.hops > MAX_HOPS {
            self.hop_drops += 1;
            return ForwardOutcome::Dropped(DropReason::HopLimit);
        }
        let Some(idx) = self
            .rules
            .iter()
            .position(|r| r.rule.matches.matches(in_port, &packet))
        else {
            self.default_drops += 1;
            *self
                .flow_default_drops
                .entry(packet.flow().clone())
                .or_default() += 1;
            return ForwardOutcome::Dropped(DropReason::NoMatch);
        };
        let entry = &mut self.rules[idx];
        entry.packets += 1;
        entry.bytes += u64::from(packet.size);
        let rule_id = entry.id;
        let actions = entry.rule.actions.clone();
        for action in &actions {
            match action {
                Action::SetDst(p) => packet.headers.dst = *p,
                Action::SetSrc(p) => packet.headers.src = *p,
                Action::SetStage(s) => packet.headers.stage = *s,
                Action::Output(port) => {
                    let port = *port;
                    if !self.ports.contains_key(&port) {
                        // rule still points at a detached app: counts as a
                        // default drop, not a match
                        self.rules[idx].packets -= 1;
                        self.rules[idx].bytes -= u64::from(packet.size);
                        self.default_drops += 1;
                        *self
                            .flow_default_drops
                            .entry(packet.flow().clone())
                            .or_default() += 1;
                        return ForwardOutcome::Dropped(DropReason::NoMatch);
                    }
                    self.port_counters.entry(port).or_default().tx += 1;
                    return ForwardOutcome::Output { port, packet };
                }
                Action::Drop => return ForwardOutcome::Dropped(DropReason::Rule(rule_id)),
            }
        }
        unreachable!("installed rules always end with a terminal action")
    }

    pub fn port_counters(&self) -> &BTreeMap<PortId, PortCounters> {
        &self.port_counters
    }

    pub fn default_drops(&self) -> u64 {
        self.default_drops
    }

    pub fn flow_default_drops(&self, flow: &FlowId) -> u64 {
        self.flow_default_drops.get(flow).copied().unwrap_or(0)
    }

    pub fn hop_drops(&self) -> u64 {
        self.hop_drops
    }
}
