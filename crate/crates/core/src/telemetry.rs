//! KPI sampling, SLA evaluation and trace export.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apps::{AppId, AppSpec};
use crate::engine::SimTime;

pub const DEFAULT_TICK: SimTime = 1.0;
pub const SHORT_WINDOW: SimTime = 10.0;
pub const LONG_WINDOW: SimTime = 60.0;
pub const DEFAULT_LOAD_BOUND: f64 = 0.95;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("SLA for `{app}`: metric `{metric}` is not produced by a {kind}")]
    UnsupportedMetric {
        app: AppId,
        metric: Metric,
        kind: &'static str,
    },
    #[error("SLA for `{0}` has no predicates")]
    Empty(AppId),
    #[error("SLA for `{0}` registered twice")]
    Duplicate(AppId),
    #[error("SLA for `{app}`: {reason}")]
    InvalidPredicate { app: AppId, reason: String },
    #[error("cannot write trace to {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Radio,
    Switch,
    App,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiSample {
    pub time: SimTime,
    pub source: Source,
    pub subject: String,
    pub metric: String,
    pub value: f64,
}

impl KpiSample {
    pub fn new(
        time: SimTime,
        source: Source,
        subject: impl Into<String>,
        metric: impl Into<String>,
        value: f64,
    ) -> Self {
        Self {
            time,
            source,
            subject: subject.into(),
            metric: metric.into(),
            value,
        }
    }
}

/// Metrics an SLA predicate may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RttMax,
    RttMean,
    SuccessRate,
    /// Load of the waveform currently carrying the app's flow.
    WaveformLoad,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::RttMax => "rtt_max",
            Metric::RttMean => "rtt_mean",
            Metric::SuccessRate => "success_rate",
            Metric::WaveformLoad => "waveform_load",
        }
    }

    pub fn default_window(self) -> SimTime {
        match self {
            Metric::SuccessRate => LONG_WINDOW,
            _ => SHORT_WINDOW,
        }
    }

    fn produced_by(self, spec: &AppSpec) -> bool {
        match spec {
            AppSpec::SmsClient { .. } => true,
            AppSpec::VideoServer { .. } => {
                matches!(self, Metric::SuccessRate | Metric::WaveformLoad)
            }
            AppSpec::SmsServer { .. } => self == Metric::WaveformLoad,
            AppSpec::Transcoder { .. } => false,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl Comparator {
    pub fn holds(self, value: f64, bound: f64) -> bool {
        match self {
            Comparator::Le => value <= bound,
            Comparator::Lt => value < bound,
            Comparator::Ge => value >= bound,
            Comparator::Gt => value > bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub metric: Metric,
    #[serde(rename = "op")]
    pub comparator: Comparator,
    pub bound: f64,
    #[serde(default)]
    pub window: Option<SimTime>,
}

impl Predicate {
    pub fn new(metric: Metric, comparator: Comparator, bound: f64) -> Self {
        Self {
            metric,
            comparator,
            bound,
            window: None,
        }
    }

    pub fn with_window(mut self, window: SimTime) -> Self {
        self.window = Some(window);
        self
    }

    pub fn window(&self) -> SimTime {
        self.window.unwrap_or_else(|| self.metric.default_window())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaSpec {
    pub app: AppId,
    pub predicates: Vec<Predicate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
    Grace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateResult {
    pub metric: Metric,
    pub value: Option<f64>,
    pub bound: f64,
    pub holds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppVerdict {
    pub verdict: Verdict,
    pub predicates: Vec<PredicateResult>,
}

impl AppVerdict {
    pub fn violated(&self, metric: Metric) -> bool {
        self.predicates
            .iter()
            .any(|p| p.metric == metric && p.holds == Some(false))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaReport {
    pub time: SimTime,
    pub apps: BTreeMap<AppId, AppVerdict>,
    pub satisfied: usize,
    pub violated: usize,
    pub grace: usize,
    /// `None` while every app is in grace.
    pub fraction_satisfied: Option<f64>,
}

impl SlaReport {
    pub fn all_satisfied(&self) -> bool {
        self.violated == 0
    }

    pub fn verdict(&self, app: &AppId) -> Option<Verdict> {
        self.apps.get(app).map(|v| v.verdict)
    }

    pub fn predicate(&self, app: &AppId, metric: Metric) -> Option<&PredicateResult> {
        self.apps
            .get(app)?
            .predicates
            .iter()
            .find(|p| p.metric == metric)
    }
}

/// Live view the evaluator reads metrics from.
pub trait MetricSource {
    /// Whether the app is running and past its instantiation latency.
    fn is_active(&self, app: &AppId) -> bool;
    /// Metric over the trailing window; `None` when there are no samples.
    fn app_metric(&self, app: &AppId, metric: Metric, window: SimTime) -> Option<f64>;
}

/// Evaluates one SLA. Pure in the source's current window contents.
pub fn evaluate_sla(spec: &SlaSpec, source: &dyn MetricSource) -> AppVerdict {
    if !source.is_active(&spec.app) {
        return AppVerdict {
            verdict: Verdict::Grace,
            predicates: spec
                .predicates
                .iter()
                .map(|p| PredicateResult {
                    metric: p.metric,
                    value: None,
                    bound: p.bound,
                    holds: None,
                })
                .collect(),
        };
    }
    let predicates: Vec<_> = spec
        .predicates
        .iter()
        .map(|p| {
            let value = source.app_metric(&spec.app, p.metric, p.window());
            PredicateResult {
                metric: p.metric,
                value,
                bound: p.bound,
                holds: value.map(|v| p.comparator.holds(v, p.bound)),
            }
        })
        .collect();
    let verdict = if predicates.iter().any(|p| p.holds == Some(false)) {
        Verdict::Violated
    } else if predicates.iter().any(|p| p.holds.is_none()) {
        Verdict::Grace
    } else {
        Verdict::Satisfied
    };
    AppVerdict {
        verdict,
        predicates,
    }
}

pub fn build_report(time: SimTime, apps: BTreeMap<AppId, AppVerdict>) -> SlaReport {
    let count = |v: Verdict| apps.values().filter(|a| a.verdict == v).count();
    let (satisfied, violated, grace) = (
        count(Verdict::Satisfied),
        count(Verdict::Violated),
        count(Verdict::Grace),
    );
    let fraction_satisfied =
        (satisfied + violated > 0).then(|| satisfied as f64 / (satisfied + violated) as f64);
    SlaReport {
        time,
        apps,
        satisfied,
        violated,
        grace,
        fraction_satisfied,
    }
}

/// Trace series exported as one file each.
pub const TRACE_FILES: [(&str, &str); 4] = [
    ("waveform_load.csv", "load"),
    ("waveform_per.csv", "residual_per"),
    ("sms_rtt.csv", "rtt"),
    ("sla_fraction.csv", "fraction_satisfied"),
];

#[derive(Debug, Clone)]
pub struct Telemetry {
    tick_period: SimTime,
    specs: Vec<SlaSpec>,
    samples: Vec<KpiSample>,
    reports: Vec<SlaReport>,
    ticks: u64,
}

impl Default for Telemetry {
    fn default() -> Self {
        Self::new(DEFAULT_TICK)
    }
}

impl Telemetry {
    pub fn new(tick_period: SimTime) -> Self {
        Self {
            tick_period,
            specs: Vec::new(),
            samples: Vec::new(),
            reports: Vec::new(),
            ticks: 0,
        }
    }

    pub fn tick_period(&self) -> SimTime {
        self.tick_period
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    /// Registers an SLA for an app whose spec is `app_spec`.
    pub fn register(&mut self, spec: SlaSpec, app_spec: &AppSpec) -> Result<(), TelemetryError> {
        validate_sla(&spec, app_spec)?;
        if self.specs.iter().any(|s| s.app == spec.app) {
            return Err(TelemetryError::Duplicate(spec.app));
        }
        self.specs.push(spec);
        Ok(())
    }

    pub fn specs(&self) -> &[SlaSpec] {
        &self.specs
    }

    /// Appends one tick batch.
    pub fn record(&mut self, batch: Vec<KpiSample>) {
        debug_assert!(batch.windows(2).all(|w| w[0].time == w[1].time));
        self.ticks += 1;
        self.samples.extend(batch);
    }

    pub fn samples(&self) -> &[KpiSample] {
        &self.samples
    }

    pub fn evaluate_slas(&mut self, time: SimTime, source: &dyn MetricSource) -> &SlaReport {
        let apps = self
            .specs
            .iter()
            .map(|s| (s.app.clone(), evaluate_sla(s, source)))
            .collect();
        self.reports.push(build_report(time, apps));
        self.reports.last().expect("just pushed")
    }

    pub fn reports(&self) -> &[SlaReport] {
        &self.reports
    }

    pub fn latest_report(&self) -> Option<&SlaReport> {
        self.reports.last()
    }

    /// Values of one `(subject, metric)` series.
    pub fn series<'a>(
        &'a self,
        subject: &'a str,
        metric: &'a str,
    ) -> impl Iterator<Item = (SimTime, f64)> + 'a {
        self.samples
            .iter()
            .filter(move |s| s.subject == subject && s.metric == metric)
            .map(|s| (s.time, s.value))
    }

    pub fn fraction_series(&self) -> impl Iterator<Item = (SimTime, f64)> + '_ {
        self.reports
            .iter()
            .filter_map(|r| r.fraction_satisfied.map(|f| (r.time, f)))
    }

    /// Renders the trace files as `(file name, contents)`.
    pub fn render_trace(&self) -> Vec<(&'static str, String)> {
        TRACE_FILES
            .iter()
            .map(|(file, metric)| {
                let mut out = String::from("time,series,value\n");
                if *metric == "fraction_satisfied" {
                    for (t, v) in self.fraction_series() {
                        let _ = writeln!(out, "{t:.3},sla,{v}");
                    }
                } else {
                    for s in self.samples.iter().filter(|s| s.metric == *metric) {
                        let _ = writeln!(out, "{:.3},{},{}", s.time, s.subject, s.value);
                    }
                }
                (*file, out)
            })
            .collect()
    }

    pub fn export_trace(&self, dir: &Path) -> Result<Vec<PathBuf>, TelemetryError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TelemetryError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::new();
        for (file, contents) in self.render_trace() {
            let path = dir.join(file);
            fs::write(&path, contents).map_err(io(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn validate_sla(spec: &SlaSpec, app_spec: &AppSpec) -> Result<(), TelemetryError> {
    if spec.predicates.is_empty() {
        return Err(TelemetryError::Empty(spec.app.clone()));
    }
    for p in &spec.predicates {
        if !p.metric.produced_by(app_spec) {
            return Err(TelemetryError::UnsupportedMetric {
                app: spec.app.clone(),
                metric: p.metric,
                kind: app_spec.kind(),
            });
        }
        if !p.bound.is_finite() {
            return Err(TelemetryError::InvalidPredicate {
                app: spec.app.clone(),
                reason: format!("bound of `{}` is not finite", p.metric),
            });
        }
        if !(p.window().is_finite() && p.window() > 0.0) {
            return Err(TelemetryError::InvalidPredicate {
                app: spec.app.clone(),
                reason: format!("window of `{}` must be positive", p.metric),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::SmsParams;
    use crate::radio::FlowId;

    struct Fixed(BTreeMap<(String, Metric), Option<f64>>, Vec<String>);

    impl MetricSource for Fixed {
        fn is_active(&self, app: &AppId) -> bool {
            self.1.iter().any(|a| a == app.as_str())
        }
        fn app_metric(&self, app: &AppId, metric: Metric, _: SimTime) -> Option<f64> {
            self.0.get(&(app.0.clone(), metric)).copied().flatten()
        }
    }

    fn sms_client() -> AppSpec {
        AppSpec::SmsClient {
            flow: FlowId::new("sms"),
            server: AppId::new("srv"),
            params: SmsParams::default(),
        }
    }

    fn sms_sla(app: &str) -> SlaSpec {
        SlaSpec {
            app: AppId::new(app),
            predicates: vec![
                Predicate::new(Metric::RttMax, Comparator::Le, 0.050),
                Predicate::new(Metric::SuccessRate, Comparator::Ge, 0.9999),
            ],
        }
    }

    #[test]
    fn rejects_unproduced_metric() {
        let mut t = Telemetry::default();
        let video = AppSpec::VideoServer {
            flow: FlowId::new("v"),
            bitrate: 1e5,
            packet_size: 1200,
        };
        let err = t.register(sms_sla("v"), &video).unwrap_err();
        assert!(matches!(err, TelemetryError::UnsupportedMetric { .. }));
        t.register(sms_sla("c"), &sms_client()).unwrap();
        assert!(matches!(
            t.register(sms_sla("c"), &sms_client()),
            Err(TelemetryError::Duplicate(_))
        ));
    }

    #[test]
    fn verdicts_and_fraction() {
        let mut t = Telemetry::default();
        for app in ["a", "b", "c"] {
            t.register(sms_sla(app), &sms_client()).unwrap();
        }
        let mut values = BTreeMap::new();
        values.insert(("a".into(), Metric::RttMax), Some(0.01));
        values.insert(("a".into(), Metric::SuccessRate), Some(1.0));
        values.insert(("b".into(), Metric::RttMax), Some(0.051));
        values.insert(("b".into(), Metric::SuccessRate), None);
        let source = Fixed(values, vec!["a".into(), "b".into()]);
        let report = t.evaluate_slas(5.0, &source).clone();
        assert_eq!(report.verdict(&AppId::new("a")), Some(Verdict::Satisfied));
        assert_eq!(report.verdict(&AppId::new("b")), Some(Verdict::Violated));
        assert_eq!(report.verdict(&AppId::new("c")), Some(Verdict::Grace));
        assert_eq!(report.fraction_satisfied, Some(0.5));
        // same window, same verdict
        assert_eq!(t.evaluate_slas(5.0, &source).apps, report.apps);
    }

    #[test]
    fn rtt_bound_is_inclusive() {
        let spec = sms_sla("a");
        let mut values = BTreeMap::new();
        values.insert(("a".into(), Metric::RttMax), Some(0.050));
        values.insert(("a".into(), Metric::SuccessRate), Some(0.9999));
        let v = evaluate_sla(&spec, &Fixed(values, vec!["a".into()]));
        assert_eq!(v.verdict, Verdict::Satisfied);
    }

    #[test]
    fn idle_is_grace() {
        let mut t = Telemetry::default();
        t.register(sms_sla("a"), &sms_client()).unwrap();
        let r = t.evaluate_slas(1.0, &Fixed(BTreeMap::new(), vec!["a".into()]));
        assert_eq!(r.grace, 1);
        assert_eq!(r.fraction_satisfied, None);
    }

    #[test]
    fn trace_has_header_and_rows() {
        let mut t = Telemetry::default();
        t.record(vec![
            KpiSample::new(1.0, Source::Radio, "HR", "load", 0.5),
            KpiSample::new(1.0, Source::Radio, "LR", "load", 0.25),
        ]);
        let files = t.render_trace();
        assert_eq!(files.len(), 4);
        assert_eq!(
            files[0].1,
            "time,series,value\n1.000,HR,0.5\n1.000,LR,0.25\n"
        );
        assert_eq!(t.ticks(), 1);
    }
}
