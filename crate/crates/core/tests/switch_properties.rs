mod common;

use common::media;
use muren_core::apps::Side;
use muren_core::controller::ControlAction;
use muren_core::node::Node;
use muren_core::radio::{FlowId, PortId};
use muren_core::scenario::ScenarioScript;
use muren_core::switch::{FlowRule, ForwardOutcome, Match, PortKind, Switch};
use proptest::prelude::*;

#[test]
fn make_before_break_on_a_bare_switch() {
    let mut sw = Switch::new("mec");
    let (app, a, b) = (PortId(1), PortId(2), PortId(3));
    sw.add_port(app, PortKind::App("video2".into())).unwrap();
    sw.add_port(a, PortKind::Radio("LR".into())).unwrap();
    sw.add_port(b, PortKind::Radio("HR".into())).unwrap();
    let flow = FlowId::new("video2");
    let m = Match::flow(&flow).in_port(app);
    let mut prio = 10;
    let mut current = sw
        .install_rule(FlowRule::output(prio, m.clone(), a))
        .unwrap();
    let mut target = a;
    for i in 0..10_000 {
        let next = if target == a { b } else { a };
        prio += 1;
        let new = sw
            .install_rule(FlowRule::output(prio, m.clone(), next))
            .unwrap();
        // a packet in flight between install and removal
        let out = sw.forward(app, media("video2", 1200, i as f64));
        assert!(matches!(out, ForwardOutcome::Output { port, .. } if port == next));
        sw.remove_rule(current).unwrap();
        let out = sw.forward(app, media("video2", 1200, i as f64));
        assert!(matches!(out, ForwardOutcome::Output { port, .. } if port == next));
        current = new;
        target = next;
    }
    assert_eq!(sw.default_drops(), 0);
    assert_eq!(sw.flow_default_drops(&flow), 0);
}

const TWO_LINKS: &str = r#"
name = "mbb"
duration = 200
mode = "manual"

[[waveforms]]
label = "A"
raw_capacity = 5_000_000

[[waveforms]]
label = "B"
raw_capacity = 5_000_000

[[apps]]
time = 0
id = "video"
kind = "video_server"
flow = "video"
bitrate = 1_000_000
waveform = "A"
"#;

#[test]
fn make_before_break_mid_stream_moves() {
    let script = ScenarioScript::parse(TWO_LINKS).unwrap();
    let mut node = Node::new(&script).unwrap();
    node.run_until(1.0).unwrap();
    let labels = ["B", "A"];
    for i in 0..10_000 {
        node.run_until(node.now() + 0.0047).unwrap();
        let action = ControlAction::MoveFlow {
            flow: FlowId::new("video"),
            waveform: labels[i % 2].into(),
        };
        node.submit(action, "test").unwrap();
    }
    node.run_until(node.now() + 1.0).unwrap();
    let plant = node.plant();
    for side in [Side::Mec, Side::Ue] {
        assert_eq!(plant.switch(side).default_drops(), 0);
        assert_eq!(plant.switch(side).hop_drops(), 0);
    }
    let sink = plant.sink_stats()[&FlowId::new("video")];
    assert!(sink.packets > 5_000);
    let applied = node
        .controller()
        .log()
        .iter()
        .filter(|e| e.applied())
        .count();
    assert_eq!(applied, 10_000);
    // old rules are gone: one send rule per side for the flow plus delivery rules
    let mec_rules = plant.switch(Side::Mec).rules().len();
    assert_eq!(mec_rules, 2);
}

#[test]
fn transcoder_teardown_before_rechain_default_drops() {
    let script = ScenarioScript::parse(TWO_LINKS).unwrap();
    let mut node = Node::new(&script).unwrap();
    node.run_until(5.0).unwrap();
    node.submit(
        ControlAction::InsertTranscoder {
            flow: FlowId::new("video"),
            target_bitrate: 500_000.0,
        },
        "test",
    )
    .unwrap();
    node.run_until(10.0).unwrap();
    let tc = node
        .plant()
        .flow_transcoder(&FlowId::new("video"))
        .cloned()
        .unwrap();
    node.plant_mut().teardown_app(&tc).unwrap();
    node.run_until(11.0).unwrap();
    let drops = node
        .plant()
        .switch(Side::Mec)
        .flow_default_drops(&FlowId::new("video"));
    // 1 Mbit/s of 1200 B packets for one second
    assert!((100..=106).contains(&drops), "{drops}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn equal_priority_overlaps_are_rejected(flows in prop::collection::vec(0u8..4, 1..12)) {
        let mut sw = Switch::new("s");
        sw.add_port(PortId(1), PortKind::Sink).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for f in flows {
            let flow = FlowId::new(format!("f{f}"));
            let r = sw.install_rule(FlowRule::output(5, Match::flow(&flow), PortId(1)));
            prop_assert_eq!(r.is_ok(), seen.insert(f));
        }
        let table = sw.rules();
        for w in table.windows(2) {
            prop_assert!(w[0].rule.priority >= w[1].rule.priority);
        }
    }
}
