//! TCP control/telemetry service around one interactive run.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};
use muren_core::node::{Command, Node, NodeError, Request};
use muren_core::scenario::{RunReport, ScenarioError, ScenarioScript};

use crate::hub::{tag, Hub};
use crate::protocol::{read_raw, ClientMessage, FrameError, ServerMessage, PROTOCOL_VERSION};

pub const DEFAULT_BIND: &str = "127.0.0.1:7878";
pub const BIND_ENV: &str = "MUREN_BIND";
pub const DEFAULT_QUEUE: usize = 4096;

/// A client that accepts no bytes for this long is dropped.
const WRITE_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("run thread panicked")]
    Panicked,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: String,
    pub pace: f64,
    /// Frames a subscriber may lag before being disconnected.
    pub queue_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: DEFAULT_BIND.into(),
            pace: 1.0,
            queue_capacity: DEFAULT_QUEUE,
        }
    }
}

/// A running service. The run starts paused at t=0.
pub struct Service {
    addr: SocketAddr,
    hub: Hub,
    commands: Sender<Request>,
    finished: Receiver<()>,
    finished_seen: AtomicBool,
    stopping: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    writers: Arc<Mutex<Vec<JoinHandle<()>>>>,
    runner: Option<JoinHandle<Result<RunReport, NodeError>>>,
}

impl Service {
    pub fn start(script: &ScenarioScript, config: &ServiceConfig) -> Result<Self, GatewayError> {
        script.validate()?;
        let listener = TcpListener::bind(&config.bind).map_err(|source| GatewayError::Bind {
            addr: config.bind.clone(),
            source,
        })?;
        let addr = listener.local_addr().map_err(|source| GatewayError::Bind {
            addr: config.bind.clone(),
            source,
        })?;
        let mut node = Node::new(script)?;
        let hub = Hub::new(config.queue_capacity);
        node.add_observer(Box::new(hub.clone()));

        let (commands, rx) = crossbeam_channel::unbounded::<Request>();
        let (done_tx, finished) = crossbeam_channel::bounded(1);
        let pace = config.pace;
        let runner = std::thread::Builder::new()
            .name("muren-node".into())
            .spawn(move || {
                node.run_interactive(&rx, pace, true)?;
                if node.is_finished() {
                    let _ = done_tx.send(());
                    node.serve_finished(&rx);
                }
                Ok(RunReport::from_node(node))
            })
            .expect("spawn node thread");

        let hello = ServerMessage::Hello {
            protocol_version: PROTOCOL_VERSION,
            scenario: script.name.clone(),
            mode: script.mode.name().into(),
            seed: script.seed,
            duration: script.duration,
            tick: script.tick,
            time: 0.0,
        };
        let stopping = Arc::new(AtomicBool::new(false));
        let writers = Arc::new(Mutex::new(Vec::new()));
        let acceptor = {
            let hub = hub.clone();
            let commands = commands.clone();
            let stopping = stopping.clone();
            let writers = writers.clone();
            std::thread::Builder::new()
                .name("muren-accept".into())
                .spawn(move || accept_loop(listener, hub, commands, hello, stopping, writers))
                .expect("spawn acceptor")
        };
        log::info!("serving {} on {addr}", script.name);
        Ok(Self {
            addr,
            hub,
            commands,
            finished,
            finished_seen: AtomicBool::new(false),
            stopping,
            acceptor: Some(acceptor),
            writers,
            runner: Some(runner),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn hub(&self) -> &Hub {
        &self.hub
    }

    /// In-process command path, equivalent to a client connection.
    pub fn commands(&self) -> Sender<Request> {
        self.commands.clone()
    }

    /// Blocks until the run reaches its end or is stopped.
    pub fn wait_finished(&self) {
        if !self.finished_seen.load(Ordering::SeqCst) {
            let _ = self.finished.recv();
            self.finished_seen.store(true, Ordering::SeqCst);
        }
    }

    /// Waits for the run to end, then shuts down.
    pub fn join(self) -> Result<RunReport, GatewayError> {
        self.wait_finished();
        self.shutdown()
    }

    /// Stops the run wherever it is and closes every connection.
    pub fn shutdown(mut self) -> Result<RunReport, GatewayError> {
        let _ = self.commands.send(stop_request());
        let report = self
            .runner
            .take()
            .map(|h| h.join().map_err(|_| GatewayError::Panicked))
            .transpose()?
            .transpose()?;
        self.stop_io();
        report.ok_or(GatewayError::Panicked)
    }

    fn stop_io(&mut self) {
        self.stopping.store(true, Ordering::SeqCst);
        // wake the acceptor
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        // writers flush what is already queued, then close
        self.hub.close();
        let writers = std::mem::take(&mut *self.writers.lock().unwrap_or_else(|e| e.into_inner()));
        for h in writers {
            let _ = h.join();
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        if self.runner.is_some() {
            let _ = self.commands.send(stop_request());
            if let Some(h) = self.runner.take() {
                let _ = h.join();
            }
        }
        if self.acceptor.is_some() {
            self.stop_io();
        }
    }
}

fn stop_request() -> Request {
    Request {
        command: Command::Stop,
        reply: None,
        tag: None,
    }
}

fn accept_loop(
    listener: TcpListener,
    hub: Hub,
    commands: Sender<Request>,
    hello: ServerMessage,
    stopping: Arc<AtomicBool>,
    writers: Arc<Mutex<Vec<JoinHandle<()>>>>,
) {
    for stream in listener.incoming() {
        if stopping.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let _ = stream.set_write_timeout(Some(WRITE_TIMEOUT));
        let peer = stream.peer_addr().ok();
        let (conn, frames) = hub.subscribe(&hello);
        log::info!("connection {conn} from {peer:?}");
        let Ok(write_half) = stream.try_clone() else {
            hub.unsubscribe(conn);
            continue;
        };
        let handle = std::thread::spawn(move || writer(write_half, frames));
        {
            let mut writers = writers.lock().unwrap_or_else(|e| e.into_inner());
            writers.retain(|h| !h.is_finished());
            writers.push(handle);
        }
        let hub = hub.clone();
        let commands = commands.clone();
        std::thread::spawn(move || reader(stream, conn, hub, commands));
    }
}

fn writer(stream: TcpStream, frames: Receiver<crate::hub::Frame>) {
    let mut out = BufWriter::new(&stream);
    'outer: while let Ok(frame) = frames.recv() {
        if out.write_all(&frame).is_err() {
            break;
        }
        // coalesce whatever is already queued into one flush
        while let Ok(frame) = frames.try_recv() {
            if out.write_all(&frame).is_err() {
                break 'outer;
            }
        }
        if out.flush().is_err() {
            break;
        }
    }
    let _ = out.flush();
    drop(out);
    let _ = stream.shutdown(Shutdown::Both);
}

fn reader(stream: TcpStream, conn: u32, hub: Hub, commands: Sender<Request>) {
    let mut input = BufReader::new(&stream);
    loop {
        let body = match read_raw(&mut input) {
            Ok(Some(body)) => body,
            Ok(None) => break,
            Err(e @ FrameError::TooLarge(_)) => {
                hub.send_to(
                    conn,
                    &ServerMessage::Error {
                        id: None,
                        message: e.to_string(),
                    },
                );
                break;
            }
            Err(_) => break,
        };
        let msg: ClientMessage = match serde_json::from_slice(&body) {
            Ok(m) => m,
            Err(e) => {
                let id = serde_json::from_slice::<serde_json::Value>(&body)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()));
                hub.send_to(
                    conn,
                    &ServerMessage::Error {
                        id,
                        message: format!("malformed command: {e}"),
                    },
                );
                continue;
            }
        };
        let id = msg.id();
        let Ok(short_id) = u32::try_from(id) else {
            hub.send_to(
                conn,
                &ServerMessage::Error {
                    id: Some(id),
                    message: "command id must fit in 32 bits".into(),
                },
            );
            continue;
        };
        let command = match msg {
            ClientMessage::SubmitAction {
                action, operator, ..
            } => Command::Submit {
                action,
                operator: operator.unwrap_or_else(|| format!("client-{conn}")),
            },
            ClientMessage::Pause { .. } => Command::Pause,
            ClientMessage::Resume { .. } => Command::Resume,
            ClientMessage::SetPace { pace, .. } => Command::SetPace(pace),
            ClientMessage::SnapshotRequest { .. } => Command::Snapshot,
        };
        if commands
            .send(Request::tagged(command, tag(conn, short_id)))
            .is_err()
        {
            hub.send_to(
                conn,
                &ServerMessage::Ack {
                    id,
                    ok: false,
                    error: Some("run stopped".into()),
                },
            );
        }
    }
    log::info!("connection {conn} closed");
    hub.unsubscribe(conn);
    let _ = stream.shutdown(Shutdown::Both);
}
