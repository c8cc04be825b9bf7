use std::collections::BTreeMap;

use muren_core::apps::AppId;
use muren_core::controller::{ControlAction, Mode};
use muren_core::node::Node;
use muren_core::radio::{CodeRate, FlowId};
use muren_core::scenario::{builtin, run, Overrides, RunReport, ScenarioError, ScenarioScript};
use muren_core::telemetry::{Metric, Verdict};

fn rendered(report: &RunReport) -> Vec<(String, String)> {
    report.render().unwrap()
}

fn series(report: &RunReport, subject: &str, metric: &str) -> BTreeMap<i64, f64> {
    report
        .telemetry
        .series(subject, metric)
        .map(|(t, v)| (t.round() as i64, v))
        .collect()
}

#[test]
fn replay_is_byte_identical_three_times() {
    for name in ["scenario-1", "scenario-2"] {
        for mode in [Mode::Scripted, Mode::Automated] {
            let script = builtin(name).unwrap();
            let overrides = Overrides {
                mode: Some(mode),
                seed: None,
            };
            let first = rendered(&run(&script, overrides).unwrap());
            for _ in 0..2 {
                assert_eq!(
                    first,
                    rendered(&run(&script, overrides).unwrap()),
                    "{name} {mode}"
                );
            }
        }
    }
}

#[test]
fn export_twice_gives_identical_bytes() {
    let report = run(&builtin("scenario-1").unwrap(), Overrides::default()).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = report.export(a.path()).unwrap();
    report.export(b.path()).unwrap();
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(
            std::fs::read(f).unwrap(),
            std::fs::read(b.path().join(name)).unwrap()
        );
    }
    for trace in [
        "waveform_load.csv",
        "waveform_per.csv",
        "sms_rtt.csv",
        "sla_fraction.csv",
    ] {
        let text = std::fs::read_to_string(a.path().join(trace)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("time,series,value"));
        let times: Vec<f64> = lines
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert!(!times.is_empty(), "{trace}");
        assert!(times.windows(2).all(|w| w[0] <= w[1]), "{trace}");
    }
}

#[test]
fn seed_changes_the_error_process_only() {
    let script = builtin("scenario-2").unwrap();
    let a = run(&script, Overrides::default()).unwrap();
    let b = run(
        &script,
        Overrides {
            mode: None,
            seed: Some(99),
        },
    )
    .unwrap();
    assert_ne!(rendered(&a), rendered(&b));
    assert_eq!(b.seed, 99);
    let kinds = |r: &RunReport| {
        r.actions
            .iter()
            .map(|e| e.action.kind())
            .collect::<Vec<_>>()
    };
    assert_eq!(kinds(&a), kinds(&b));
}

#[test]
fn summary_is_conserved_per_flow() {
    for name in ["scenario-1", "scenario-2"] {
        let report = run(&builtin(name).unwrap(), Overrides::default()).unwrap();
        for f in &report.summary.flows {
            let c = &f.radio;
            assert_eq!(
                c.offered,
                c.delivered + c.dropped_queue_full + c.dropped_channel + c.in_queue,
                "{}",
                f.flow
            );
            if f.flow.as_str().starts_with("video") {
                assert_eq!(f.sink.packets, c.delivered, "{}", f.flow);
            }
            assert_eq!(f.switch_default_drops, 0);
        }
    }
}

#[test]
fn action_log_times_strictly_increase() {
    for name in ["scenario-1", "scenario-2"] {
        for mode in [Mode::Scripted, Mode::Automated] {
            let r = run(
                &builtin(name).unwrap(),
                Overrides {
                    mode: Some(mode),
                    seed: None,
                },
            )
            .unwrap();
            assert!(r.actions.windows(2).all(|w| w[0].time < w[1].time));
            assert!(r.actions.iter().all(|a| a.applied()));
        }
    }
}

#[test]
fn scenario_two_scripted_action_order() {
    let r = run(&builtin("scenario-2").unwrap(), Overrides::default()).unwrap();
    let got: Vec<ControlAction> = r.actions.iter().map(|e| e.action.clone()).collect();
    assert_eq!(
        got,
        vec![
            ControlAction::SetCodeRate {
                waveform: "LR".into(),
                rate: CodeRate::Half
            },
            ControlAction::InsertTranscoder {
                flow: FlowId::new("video2"),
                target_bitrate: 110_000.0
            },
            ControlAction::MoveFlow {
                flow: FlowId::new("video2"),
                waveform: "HR".into()
            },
            ControlAction::InsertTranscoder {
                flow: FlowId::new("video1"),
                target_bitrate: 300_000.0
            },
        ]
    );
}

#[test]
fn tick_count_matches_duration() {
    for name in ["scenario-1", "scenario-2"] {
        let script = builtin(name).unwrap();
        let r = run(&script, Overrides::default()).unwrap();
        assert_eq!(r.summary.ticks, (script.duration / script.tick) as u64);
        assert_eq!(r.telemetry.reports().len() as u64, r.summary.ticks);
    }
}

#[test]
fn scenario_one_loads() {
    let r = run(&builtin("scenario-1").unwrap(), Overrides::default()).unwrap();
    let hr = series(&r, "HR", "load");
    assert!((hr[&100] - 0.9).abs() <= 0.01, "{}", hr[&100]);
    let lr = series(&r, "LR", "offered_bps");
    // MoveFlow at 170: LR offered drops by exactly video2's rate
    assert!((lr[&169] - lr[&181] - 120_000.0).abs() <= 1_000.0);
    let lr_load = series(&r, "LR", "load");
    assert!(lr_load[&169] > 0.9 && lr_load[&185] < 0.05);
    let hr_offered = series(&r, "HR", "offered_bps");
    assert!((hr_offered[&240] - 720_000.0).abs() <= 0.02 * 720_000.0);
}

#[test]
fn removing_the_late_error_removes_the_second_episode() {
    let mut script = builtin("scenario-2").unwrap();
    let video2 = AppId::new("video2");
    let violated_after = |r: &RunReport, t0: f64| {
        r.telemetry.reports().iter().any(|rep| {
            rep.time > t0
                && rep.apps.get(&video2).is_some_and(|v| {
                    v.verdict == Verdict::Violated && v.violated(Metric::SuccessRate)
                })
        })
    };
    let full = run(&script, Overrides::default()).unwrap();
    assert!(violated_after(&full, 290.0));
    script.errors.retain(|e| e.time < 290.0);
    let trimmed = run(&script, Overrides::default()).unwrap();
    assert!(!violated_after(&trimmed, 290.0));
}

#[test]
fn parse_errors_carry_line_numbers() {
    let bad = "name = \"x\"\nduration = 10\n\nwaveforms = [ { label = \"A\" raw_capacity = 1 } ]\n";
    match ScenarioScript::parse(bad) {
        Err(ScenarioError::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
    let missing = ScenarioScript::load(std::path::Path::new("/nonexistent/scenario.toml"));
    assert!(matches!(missing, Err(ScenarioError::Io { .. })));
}

#[test]
fn semantic_errors_name_the_entry() {
    let text = muren_core::scenario::SCENARIO_1.replace(
        "waveform = \"LR\"\n\n[[slas]]",
        "waveform = \"XR\"\n\n[[slas]]",
    );
    let err = ScenarioScript::parse(&text).unwrap_err().to_string();
    assert!(err.contains("video2") && err.contains("XR"), "{err}");
}

#[test]
fn snapshots() {
    let script = builtin("scenario-1").unwrap();
    let mut node = Node::new(&script).unwrap();
    let s0 = node.snapshot();
    assert_eq!(s0.time, 0.0);
    assert!(s0
        .waveforms
        .iter()
        .all(|w| w.down.kpis.queue_bytes == 0 && w.down.flows.is_empty()));
    assert!(s0.switches.iter().all(|s| {
        s.default_drops == 0 && s.port_counters.values().all(|c| *c == Default::default())
    }));
    assert!(s0.apps.is_empty());
    node.run_until(200.0).unwrap();
    let a = serde_json::to_string(&node.snapshot()).unwrap();
    let b = serde_json::to_string(&node.snapshot()).unwrap();
    assert_eq!(a, b);
    for w in node.snapshot().waveforms {
        for c in w.down.flows.values().chain(w.up.flows.values()) {
            assert!(c.is_conserved());
        }
    }
}
