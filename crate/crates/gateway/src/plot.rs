//! Plot-ready series: one wide CSV per chart, one row per tick.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use muren_core::controller::{ControlAction, Initiator};
use muren_core::scenario::RunReport;
use muren_core::telemetry::Telemetry;

/// `(file, metrics)`; every subject reporting one of the metrics gets a column.
pub const CHARTS: [(&str, &[&str]); 4] = [
    ("loads.csv", &["load"]),
    ("rtt.csv", &["rtt", "rtt_max"]),
    ("per.csv", &["residual_per", "channel_per"]),
    ("success.csv", &["success_rate"]),
];

fn wide(telemetry: &Telemetry, metrics: &[&str]) -> String {
    let columns: BTreeSet<(&str, &str)> = telemetry
        .samples()
        .iter()
        .filter_map(|s| {
            metrics
                .iter()
                .find(|m| **m == s.metric)
                .map(|m| (*m, s.subject.as_str()))
        })
        .collect();
    let columns: Vec<_> = metrics
        .iter()
        .flat_map(|m| columns.iter().filter(move |(cm, _)| cm == m))
        .collect();
    let mut out = String::from("time");
    for (metric, subject) in &columns {
        if metrics.len() == 1 {
            let _ = write!(out, ",{subject}");
        } else {
            let _ = write!(out, ",{subject}.{metric}");
        }
    }
    out.push('\n');
    let samples = telemetry.samples();
    let mut i = 0;
    while i < samples.len() {
        let t = samples[i].time;
        let end = samples[i..]
            .iter()
            .position(|s| s.time != t)
            .map_or(samples.len(), |n| i + n);
        let row = &samples[i..end];
        let _ = write!(out, "{t:.3}");
        for (metric, subject) in &columns {
            out.push(',');
            if let Some(s) = row
                .iter()
                .find(|s| s.metric == *metric && s.subject == *subject)
            {
                let _ = write!(out, "{}", s.value);
            }
        }
        out.push('\n');
        i = end;
    }
    out
}

fn fraction(telemetry: &Telemetry) -> String {
    let mut out = String::from("time,fraction_satisfied\n");
    for r in telemetry.reports() {
        let _ = write!(out, "{:.3},", r.time);
        if let Some(f) = r.fraction_satisfied {
            let _ = write!(out, "{f}");
        }
        out.push('\n');
    }
    out
}

fn describe(action: &ControlAction) -> String {
    match action {
        ControlAction::MoveFlow { flow, waveform } => format!("{} -> {waveform}", flow.0),
        ControlAction::SetCodeRate { waveform, rate } => format!("{waveform} rate {rate}"),
        ControlAction::InsertTranscoder {
            flow,
            target_bitrate,
        } => format!("{} at {target_bitrate} bps", flow.0),
        ControlAction::SetAppBitrate { app, bitrate } => format!("{} at {bitrate} bps", app.0),
        ControlAction::RemoveTranscoder { flow } => flow.0.clone(),
        ControlAction::SetChannelError { waveform, per } => format!("{waveform} per {per}"),
    }
}

/// Chart annotations: applied actions only.
fn annotations(report: &RunReport) -> String {
    let mut out = String::from("time,kind,initiator,detail\n");
    for e in report.actions.iter().filter(|e| e.applied()) {
        let who = match &e.initiator {
            Initiator::Operator { id } => format!("operator:{id}"),
            Initiator::Policy { rule } => format!("policy:{rule}"),
        };
        let _ = writeln!(
            out,
            "{:.3},{},{},\"{}\"",
            e.time,
            e.action.kind(),
            who,
            describe(&e.action).replace('"', "\"\"")
        );
    }
    out
}

pub fn render(report: &RunReport) -> Vec<(String, String)> {
    let mut files: Vec<(String, String)> = CHARTS
        .iter()
        .map(|(file, metrics)| (file.to_string(), wide(&report.telemetry, metrics)))
        .collect();
    files.push(("sla.csv".into(), fraction(&report.telemetry)));
    files.push(("actions.csv".into(), annotations(report)));
    files
}

pub fn export(report: &RunReport, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (file, contents) in render(report) {
        let path = dir.join(file);
        fs::write(&path, contents)?;
        written.push(path);
    }
    Ok(written)
}
