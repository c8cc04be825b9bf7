mod common;

use common::{cbr, drive, media};
use muren_core::engine::RandomSource;
use muren_core::radio::{CodeRate, Waveform, WaveformConfig};
use proptest::prelude::*;

fn waveform(raw: f64, rate: CodeRate, per: f64, seed: u64) -> Waveform {
    let mut cfg = WaveformConfig::new("W", raw);
    cfg.code_rate = rate;
    cfg.channel_per = per;
    Waveform::new("W.down", &cfg, RandomSource::substream(seed, "W.down"))
}

/// Sends `n` packets spaced so the queue never builds up.
fn loss_fraction(rate: CodeRate, per: f64, n: u64, seed: u64) -> f64 {
    let mut wf = waveform(1e6, rate, per, seed);
    let gap = 0.01;
    let arrivals = (0..n)
        .map(|i| (i as f64 * gap, media("f", 100, i as f64 * gap)))
        .collect();
    let t = drive(&mut wf, arrivals, n as f64 * gap + 1.0);
    assert_eq!(t.offered, n);
    assert_eq!(t.queue_drops, 0);
    t.lost as f64 / n as f64
}

#[test]
fn uniform_error_calibration_rate_one() {
    let measured = loss_fraction(CodeRate::One, 0.05, 100_000, 7);
    assert!((0.045..=0.055).contains(&measured), "{measured}");
}

#[test]
fn residual_error_above_threshold_at_half_rate() {
    let measured = loss_fraction(CodeRate::Half, 0.20, 100_000, 11);
    assert!((measured - 0.10).abs() <= 0.01, "{measured}");
}

#[test]
fn errors_below_threshold_are_corrected() {
    assert_eq!(loss_fraction(CodeRate::Half, 0.05, 20_000, 3), 0.0);
}

#[test]
fn serialization_delay_of_1500_bytes() {
    let mut wf = waveform(125_000.0, CodeRate::One, 0.0, 1);
    match wf.enqueue(0.0, media("f", 1500, 0.0)) {
        muren_core::radio::EnqueueOutcome::Accepted { departure: Some(t) } => {
            assert!((t - 0.096).abs() < 1e-12, "{t}")
        }
        other => panic!("{other:?}"),
    }
}

/// Delivered bits over 60 s against min(offered, effective) x (1 - residual).
fn goodput_case(raw: f64, rate: CodeRate, per: f64, offered: f64, seed: u64) {
    let duration = 60.0;
    let mut wf = waveform(raw, rate, per, seed);
    let t = drive(&mut wf, cbr("v", offered, 1200, duration), duration);
    let eff = raw * rate.as_f64();
    let expected = offered.min(eff) * (1.0 - rate.residual_per(per, 0.10));
    let measured = t.delivered_bits / duration;
    let err = (measured - expected).abs() / expected;
    assert!(
        err <= 0.02,
        "measured {measured} expected {expected} err {err}"
    );
}

#[test]
fn goodput_law_overloaded() {
    goodput_case(125_000.0, CodeRate::One, 0.0, 200_000.0, 1);
}

#[test]
fn goodput_law_overloaded_with_errors() {
    goodput_case(250_000.0, CodeRate::Half, 0.20, 200_000.0, 2);
    goodput_case(125_000.0, CodeRate::One, 0.05, 200_000.0, 3);
}

#[test]
fn goodput_law_underloaded() {
    goodput_case(1_000_000.0, CodeRate::One, 0.05, 600_000.0, 4);
}

#[test]
fn load_of_120k_on_125k() {
    let mut wf = waveform(125_000.0, CodeRate::One, 0.0, 1);
    drive(&mut wf, cbr("v", 120_000.0, 1200, 30.0), 30.0);
    let k = wf.sample_kpis(30.0, 10.0);
    assert!((k.load - 0.96).abs() <= 0.02, "{}", k.load);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conservation_per_flow(
        raw in 50_000.0f64..2_000_000.0,
        per in 0.0f64..0.5,
        rate_idx in 0usize..3,
        flows in prop::collection::vec((10_000.0f64..600_000.0, 64u32..1500), 1..4),
        seed in any::<u64>(),
        stop in 1.0f64..8.0,
    ) {
        let rate = CodeRate::ALL[rate_idx];
        let mut wf = waveform(raw, rate, per, seed);
        let mut arrivals = Vec::new();
        for (i, (bps, size)) in flows.iter().enumerate() {
            arrivals.extend(cbr(&format!("f{i}"), *bps, *size, 10.0));
        }
        arrivals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let tally = drive(&mut wf, arrivals, stop);
        for c in wf.flow_counters().values() {
            prop_assert!(c.is_conserved());
            prop_assert_eq!(c.offered, c.delivered + c.dropped_queue_full + c.dropped_channel + c.in_queue);
        }
        let totals = wf.totals();
        prop_assert_eq!(totals.offered, tally.offered);
        prop_assert_eq!(totals.delivered, tally.delivered);
        prop_assert_eq!(totals.dropped_channel, tally.lost);
        prop_assert_eq!(totals.dropped_queue_full, tally.queue_drops);
        prop_assert!(wf.queue_bytes() <= wf.queue_capacity());
    }
}
