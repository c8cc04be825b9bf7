#![allow(dead_code)]

use muren_core::engine::{Scheduler, SimTime};
use muren_core::radio::{
    DepartureOutcome, EnqueueOutcome, FlowId, Headers, Packet, Payload, PortId, Waveform,
};

pub fn media(flow: &str, size: u32, now: SimTime) -> Packet {
    Packet {
        headers: Headers {
            flow: FlowId::new(flow),
            src: PortId(1),
            dst: PortId(2),
            hops: 0,
            stage: 0,
        },
        size,
        created_at: now,
        payload: Payload::Media,
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct Tally {
    pub offered: u64,
    pub queue_drops: u64,
    pub lost: u64,
    pub delivered: u64,
    pub delivered_bits: f64,
}

enum Ev {
    Arrive(Packet),
    Depart,
}

/// Feeds `arrivals` through one waveform and counts outcomes for departures
/// up to `until`.
pub fn drive(wf: &mut Waveform, arrivals: Vec<(SimTime, Packet)>, until: SimTime) -> Tally {
    let mut sched = Scheduler::new();
    for (t, p) in arrivals {
        sched.schedule(t, Ev::Arrive(p)).unwrap();
    }
    let mut tally = Tally::default();
    while let Some(ev) = sched.pop_until(until) {
        let now = ev.fire_time;
        match ev.payload {
            Ev::Arrive(p) => {
                tally.offered += 1;
                match wf.enqueue(now, p) {
                    EnqueueOutcome::Accepted { departure: Some(t) } => {
                        sched.schedule(t, Ev::Depart).unwrap();
                    }
                    EnqueueOutcome::Accepted { departure: None } => {}
                    EnqueueOutcome::DroppedQueueFull => tally.queue_drops += 1,
                }
            }
            Ev::Depart => {
                let dep = wf
                    .complete_departure(now)
                    .expect("departure without packet");
                match dep.outcome {
                    DepartureOutcome::Delivered { .. } => {
                        tally.delivered += 1;
                        tally.delivered_bits += dep.packet.bits();
                    }
                    DepartureOutcome::LostChannel => tally.lost += 1,
                }
                if let Some(t) = dep.next_departure {
                    sched.schedule(t, Ev::Depart).unwrap();
                }
            }
        }
    }
    tally
}

/// CBR arrivals of `size`-byte packets at `bps` over `[0, duration)`.
pub fn cbr(flow: &str, bps: f64, size: u32, duration: SimTime) -> Vec<(SimTime, Packet)> {
    let gap = f64::from(size) * 8.0 / bps;
    let n = (duration / gap).floor() as u64;
    (0..n)
        .map(|i| {
            let t = i as f64 * gap;
            (t, media(flow, size, t))
        })
        .collect()
}
