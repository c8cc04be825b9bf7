#![allow(dead_code)]

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use muren_gateway::protocol::{read_frame, read_raw, write_frame, ClientMessage, ServerMessage};

/// Minimal blocking stream client.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        stream
            .set_read_timeout(Some(Duration::from_secs(60)))
            .unwrap();
        Self {
            writer: BufWriter::new(stream.try_clone().unwrap()),
            reader: BufReader::new(stream),
        }
    }

    pub fn send(&mut self, msg: &ClientMessage) {
        write_frame(&mut self.writer, msg).unwrap();
    }

    pub fn send_raw(&mut self, body: &[u8]) {
        use std::io::Write;
        self.writer
            .write_all(&(body.len() as u32).to_be_bytes())
            .unwrap();
        self.writer.write_all(body).unwrap();
        self.writer.flush().unwrap();
    }

    /// `None` once the service closes the stream.
    pub fn recv(&mut self) -> Option<ServerMessage> {
        read_frame(&mut self.reader).ok().flatten()
    }

    pub fn recv_raw(&mut self) -> Option<Vec<u8>> {
        read_raw(&mut self.reader).ok().flatten()
    }

    /// Reads until `pred` matches, returning everything read including the match.
    pub fn recv_until(
        &mut self,
        mut pred: impl FnMut(&ServerMessage) -> bool,
    ) -> Vec<ServerMessage> {
        let mut seen = Vec::new();
        loop {
            let msg = self
                .recv()
                .expect("stream ended before the expected message");
            let done = pred(&msg);
            seen.push(msg);
            if done {
                return seen;
            }
        }
    }

    /// Reads to the end of the stream.
    pub fn drain(&mut self) -> Vec<ServerMessage> {
        std::iter::from_fn(|| self.recv()).collect()
    }

    pub fn drain_raw(&mut self) -> Vec<Vec<u8>> {
        std::iter::from_fn(|| self.recv_raw()).collect()
    }
}

pub fn is_finished(msg: &ServerMessage) -> bool {
    matches!(msg, ServerMessage::RunState { state, .. } if state.finished)
}

pub fn ack_for(id: u64) -> impl FnMut(&ServerMessage) -> bool {
    move |m| matches!(m, ServerMessage::Ack { id: i, .. } | ServerMessage::Snapshot { id: i, .. } if *i == id)
}
