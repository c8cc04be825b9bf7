mod common;

use common::media;
use muren_core::apps::{AppId, AppManager, AppSpec, Side};
use muren_core::controller::ControlAction;
use muren_core::node::Node;
use muren_core::radio::{FlowId, PortId};
use muren_core::scenario::ScenarioScript;
use muren_core::telemetry::Metric;

fn one_video(bitrate: u32, capacity: u32) -> ScenarioScript {
    ScenarioScript::parse(&format!(
        r#"
name = "video"
duration = 120
mode = "manual"

[[waveforms]]
label = "A"
raw_capacity = {capacity}

[[apps]]
time = 0
id = "video"
kind = "video_server"
flow = "video"
bitrate = {bitrate}
waveform = "A"
"#
    ))
    .unwrap()
}

fn sink_bits(node: &Node) -> f64 {
    node.plant().sink_stats()[&FlowId::new("video")].bits
}

#[test]
fn transcoder_output_matches_target_rate() {
    let mut node = Node::new(&one_video(200_000, 1_000_000)).unwrap();
    node.run_until(10.0).unwrap();
    node.submit(
        ControlAction::InsertTranscoder {
            flow: FlowId::new("video"),
            target_bitrate: 110_000.0,
        },
        "test",
    )
    .unwrap();
    node.run_until(20.0).unwrap();
    let before = sink_bits(&node);
    node.run_until(80.0).unwrap();
    let rate = (sink_bits(&node) - before) / 60.0;
    assert!((rate - 110_000.0).abs() / 110_000.0 <= 0.02, "{rate}");
}

#[test]
fn transcoded_video_lowers_offered_load_by_a_third() {
    let mut node = Node::new(&one_video(900_000, 1_000_000)).unwrap();
    node.run_until(30.0).unwrap();
    let before = node
        .plant()
        .radio()
        .waveform("A", muren_core::radio::Direction::Down)
        .unwrap()
        .sample_kpis(30.0, 10.0);
    node.submit(
        ControlAction::InsertTranscoder {
            flow: FlowId::new("video"),
            target_bitrate: 600_000.0,
        },
        "test",
    )
    .unwrap();
    node.run_until(45.0).unwrap();
    let after = node
        .plant()
        .radio()
        .waveform("A", muren_core::radio::Direction::Down)
        .unwrap()
        .sample_kpis(45.0, 10.0);
    let ratio = after.offered_bps / before.offered_bps;
    assert!((ratio - 2.0 / 3.0).abs() <= 0.02, "{ratio}");
}

#[test]
fn transcoder_emits_cbr_from_bursty_input() {
    let mut apps = AppManager::new(0.0);
    let video = AppId::new("video");
    let tc = AppId::new("tc");
    let flow = FlowId::new("video");
    apps.instantiate(
        0.0,
        video,
        AppSpec::VideoServer {
            flow: flow.clone(),
            bitrate: 200_000.0,
            packet_size: 1200,
        },
        Side::Mec,
        PortId(1),
        PortId(9),
    )
    .unwrap();
    let mut next = apps
        .instantiate(
            0.0,
            tc.clone(),
            AppSpec::Transcoder {
                input_flow: flow,
                target_bitrate: 110_000.0,
                processing_delay: 0.02,
                packet_size: 1200,
            },
            Side::Mec,
            PortId(2),
            PortId(9),
        )
        .unwrap();
    // a 200-packet burst, then silence
    for i in 0..200 {
        apps.transcode(i as f64 * 1e-4, &tc, media("video", 1200, 0.0))
            .unwrap();
    }
    let mut emitted = Vec::new();
    while let Some(t) = next {
        if t > 20.0 {
            break;
        }
        let out = apps.on_emission(t, &tc).unwrap();
        if !out.packets.is_empty() {
            emitted.push(t);
        }
        next = out.next_emission;
    }
    // 200 x 9600 bits x 110/200 of credit -> 110 output packets
    assert_eq!(emitted.len(), 110);
    let period = 1200.0 * 8.0 / 110_000.0;
    for w in emitted.windows(2) {
        assert!((w[1] - w[0] - period).abs() < 1e-9, "{:?}", w);
    }
}

#[test]
fn unloaded_sms_round_trip() {
    let script = ScenarioScript::parse(
        r#"
name = "sms"
duration = 30
mode = "manual"

[[waveforms]]
label = "LR"
raw_capacity = 125_000

[[apps]]
time = 0
id = "server"
kind = "sms_server"
side = "ue"
flow = "sms"
waveform = "LR"

[[apps]]
time = 0
id = "client"
kind = "sms_client"
flow = "sms"
server = "server"
waveform = "LR"

[[slas]]
app = "client"
predicates = [{ metric = "rtt_max", op = "<=", bound = 0.050 }]
"#,
    )
    .unwrap();
    let mut node = Node::new(&script).unwrap();
    node.run().unwrap();
    let client = node.plant().apps().get(&AppId::new("client")).unwrap();
    let rtt = client.kpis.rtt_max(30.0, 30.0).unwrap();
    assert!((rtt - 2.0 * (0.0064 + 0.001)).abs() < 1e-9, "{rtt}");
    assert!(client.kpis.sms_successes >= 28);
    assert_eq!(client.kpis.sms_timeouts, 0);
    let report = node.telemetry().latest_report().unwrap();
    assert!(report.all_satisfied());
    assert!(
        report
            .predicate(&AppId::new("client"), Metric::RttMax)
            .unwrap()
            .holds
            == Some(true)
    );
}
