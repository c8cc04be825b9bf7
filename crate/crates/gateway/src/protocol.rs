//! Wire format: every message is a frame made of a 4-byte big-endian
//! length followed by that many bytes of UTF-8 JSON.

use std::io::{self, Read, Write};

use muren_core::controller::{ActionLogEntry, ControlAction};
use muren_core::engine::SimTime;
use muren_core::node::RunState;
use muren_core::telemetry::{KpiSample, SlaReport};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

/// Frames longer than this are refused in both directions.
pub const MAX_FRAME: usize = 16 << 20;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME} byte limit")]
    TooLarge(usize),
    #[error("malformed message: {0}")]
    Json(#[from] serde_json::Error),
}

/// Service to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        protocol_version: u32,
        scenario: String,
        mode: String,
        seed: u64,
        duration: SimTime,
        tick: SimTime,
        time: SimTime,
    },
    KpiBatch {
        time: SimTime,
        samples: Vec<KpiSample>,
    },
    SlaReport {
        time: SimTime,
        report: SlaReport,
    },
    ActionLogged {
        time: SimTime,
        entry: ActionLogEntry,
    },
    RunState {
        time: SimTime,
        state: RunState,
    },
    Ack {
        id: u64,
        ok: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Snapshot {
        id: u64,
        snapshot: serde_json::Value,
    },
    /// A frame that could not be turned into a command. `id` is set when
    /// it could be recovered.
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        message: String,
    },
}

impl ServerMessage {
    /// Telemetry messages are broadcast; the rest answer one client.
    pub fn is_telemetry(&self) -> bool {
        matches!(
            self,
            ServerMessage::KpiBatch { .. }
                | ServerMessage::SlaReport { .. }
                | ServerMessage::ActionLogged { .. }
                | ServerMessage::RunState { .. }
        )
    }

    pub fn time(&self) -> Option<SimTime> {
        match self {
            ServerMessage::Hello { time, .. }
            | ServerMessage::KpiBatch { time, .. }
            | ServerMessage::SlaReport { time, .. }
            | ServerMessage::ActionLogged { time, .. }
            | ServerMessage::RunState { time, .. } => Some(*time),
            _ => None,
        }
    }
}

/// Client to service. Every command carries a client-chosen `id` that is
/// echoed in its single reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    SubmitAction {
        id: u64,
        action: ControlAction,
        #[serde(default)]
        operator: Option<String>,
    },
    Pause {
        id: u64,
    },
    Resume {
        id: u64,
    },
    SetPace {
        id: u64,
        pace: f64,
    },
    SnapshotRequest {
        id: u64,
    },
}

impl ClientMessage {
    pub fn id(&self) -> u64 {
        match self {
            ClientMessage::SubmitAction { id, .. }
            | ClientMessage::Pause { id }
            | ClientMessage::Resume { id }
            | ClientMessage::SetPace { id, .. }
            | ClientMessage::SnapshotRequest { id } => *id,
        }
    }
}

pub fn encode<T: Serialize + ?Sized>(msg: &T) -> Result<Vec<u8>, FrameError> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_FRAME {
        return Err(FrameError::TooLarge(body.len()));
    }
    let mut frame = Vec::with_capacity(body.len() + 4);
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

pub fn write_frame<W: Write, T: Serialize + ?Sized>(w: &mut W, msg: &T) -> Result<(), FrameError> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one raw frame body. `Ok(None)` on a clean end of stream.
pub fn read_raw<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, FrameError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn read_frame<R: Read, T: for<'de> Deserialize<'de>>(
    r: &mut R,
) -> Result<Option<T>, FrameError> {
    match read_raw(r)? {
        Some(body) => Ok(Some(serde_json::from_slice(&body)?)),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use muren_core::radio::FlowId;

    #[test]
    fn frame_roundtrip() {
        let msg = ClientMessage::SubmitAction {
            id: 3,
            action: ControlAction::MoveFlow {
                flow: FlowId::new("video2"),
                waveform: "HR".into(),
            },
            operator: None,
        };
        let frame = encode(&msg).unwrap();
        assert_eq!(&frame[..4], &((frame.len() - 4) as u32).to_be_bytes());
        let mut r = &frame[..];
        let back: ClientMessage = read_frame(&mut r).unwrap().unwrap();
        assert_eq!(back, msg);
        assert!(read_frame::<_, ClientMessage>(&mut r).unwrap().is_none());
    }

    #[test]
    fn command_json_shape() {
        let cmd: ClientMessage = serde_json::from_str(
            r#"{"type":"submit_action","id":1,"action":{"kind":"insert_transcoder","flow":"video1","target_bitrate":600000}}"#,
        )
        .unwrap();
        assert_eq!(cmd.id(), 1);
        let cmd: ClientMessage =
            serde_json::from_str(r#"{"type":"set_pace","id":9,"pace":10}"#).unwrap();
        assert_eq!(cmd, ClientMessage::SetPace { id: 9, pace: 10.0 });
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"pause","id":1,"x":2}"#).is_err());
    }

    #[test]
    fn oversized_length_refused() {
        let mut r = &((MAX_FRAME as u32) + 1).to_be_bytes()[..];
        assert!(matches!(read_raw(&mut r), Err(FrameError::TooLarge(_))));
    }

    #[test]
    fn truncated_body_is_an_error() {
        let mut frame = encode(&ClientMessage::Pause { id: 1 }).unwrap();
        frame.truncate(frame.len() - 2);
        assert!(read_raw(&mut &frame[..]).is_err());
    }
}
