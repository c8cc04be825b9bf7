//! Fan-out of node telemetry to connected clients.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use crossbeam_channel::{Receiver, Sender, TrySendError};
use muren_core::controller::ActionLogEntry;
use muren_core::engine::SimTime;
use muren_core::node::{Observer, Reply, RunState};
use muren_core::telemetry::{KpiSample, SlaReport};

use crate::protocol::{encode, ServerMessage};

pub type Frame = Arc<[u8]>;

/// Request tags carry the connection in the high 32 bits and the client's
/// command id in the low 32.
pub fn tag(conn: u32, id: u32) -> u64 {
    (u64::from(conn) << 32) | u64::from(id)
}

pub fn untag(tag: u64) -> (u32, u32) {
    ((tag >> 32) as u32, tag as u32)
}

#[derive(Default)]
struct Inner {
    subscribers: BTreeMap<u32, Sender<Frame>>,
    next_conn: u32,
    dropped: u64,
}

/// Shared subscriber table. Cloning gives another handle to the same table.
#[derive(Clone, Default)]
pub struct Hub {
    inner: Arc<Mutex<Inner>>,
    capacity: usize,
}

impl Hub {
    /// `capacity` is the number of frames a subscriber may fall behind
    /// before it is cut off.
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Arc::default(),
            capacity: capacity.max(1),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Registers a subscriber whose queue starts with `greeting`. Nothing
    /// broadcast earlier is seen; everything broadcast later is.
    pub fn subscribe(&self, greeting: &ServerMessage) -> (u32, Receiver<Frame>) {
        let (tx, rx) = crossbeam_channel::bounded(self.capacity);
        let mut inner = self.lock();
        let conn = inner.next_conn;
        inner.next_conn = inner.next_conn.wrapping_add(1);
        if let Ok(frame) = encode(greeting) {
            let _ = tx.try_send(frame.into());
        }
        inner.subscribers.insert(conn, tx);
        (conn, rx)
    }

    pub fn unsubscribe(&self, conn: u32) {
        self.lock().subscribers.remove(&conn);
    }

    pub fn subscriber_count(&self) -> usize {
        self.lock().subscribers.len()
    }

    /// Subscribers cut off for falling behind.
    pub fn dropped(&self) -> u64 {
        self.lock().dropped
    }

    /// Disconnects everyone.
    pub fn close(&self) {
        self.lock().subscribers.clear();
    }

    pub fn broadcast(&self, msg: &ServerMessage) {
        let mut inner = self.lock();
        if inner.subscribers.is_empty() {
            return;
        }
        let frame: Frame = match encode(msg) {
            Ok(f) => f.into(),
            Err(e) => {
                log::error!("dropping unencodable message: {e}");
                return;
            }
        };
        let mut lagging = Vec::new();
        for (conn, tx) in &inner.subscribers {
            match tx.try_send(frame.clone()) {
                Ok(()) => {}
                Err(TrySendError::Full(_)) => lagging.push((*conn, true)),
                Err(TrySendError::Disconnected(_)) => lagging.push((*conn, false)),
            }
        }
        for (conn, overflow) in lagging {
            inner.subscribers.remove(&conn);
            if overflow {
                inner.dropped += 1;
                log::warn!("subscriber {conn} fell behind and was disconnected");
            }
        }
    }

    /// Sends to one subscriber only.
    pub fn send_to(&self, conn: u32, msg: &ServerMessage) {
        let mut inner = self.lock();
        let Some(tx) = inner.subscribers.get(&conn) else {
            return;
        };
        let Ok(frame) = encode(msg) else {
            return;
        };
        if tx.try_send(frame.into()).is_err() {
            inner.subscribers.remove(&conn);
            inner.dropped += 1;
        }
    }
}

/// Converts a node reply into the message answering command `id`.
pub fn reply_message(id: u64, reply: &Reply) -> ServerMessage {
    match reply {
        Reply::Ack(Ok(())) => ServerMessage::Ack {
            id,
            ok: true,
            error: None,
        },
        Reply::Ack(Err(e)) => ServerMessage::Ack {
            id,
            ok: false,
            error: Some(e.clone()),
        },
        Reply::Snapshot(s) => match serde_json::to_value(s) {
            Ok(snapshot) => ServerMessage::Snapshot { id, snapshot },
            Err(e) => ServerMessage::Error {
                id: Some(id),
                message: format!("snapshot not serializable: {e}"),
            },
        },
    }
}

impl Observer for Hub {
    fn on_tick(&mut self, time: SimTime, batch: &[KpiSample], report: &SlaReport) {
        self.broadcast(&ServerMessage::KpiBatch {
            time,
            samples: batch.to_vec(),
        });
        self.broadcast(&ServerMessage::SlaReport {
            time,
            report: report.clone(),
        });
    }

    fn on_action(&mut self, entry: &ActionLogEntry) {
        self.broadcast(&ServerMessage::ActionLogged {
            time: entry.time,
            entry: entry.clone(),
        });
    }

    fn on_run_state(&mut self, time: SimTime, state: &RunState) {
        self.broadcast(&ServerMessage::RunState {
            time,
            state: state.clone(),
        });
    }

    fn on_reply(&mut self, tag: u64, reply: &Reply) {
        let (conn, id) = untag(tag);
        self.send_to(conn, &reply_message(u64::from(id), reply));
    }
}
