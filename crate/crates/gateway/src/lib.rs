//! Web-socket HMI gateway.
//!
//! One acceptor thread, one thread per client and one aggregator that folds
//! bus traffic into a shared latest-telemetry cell. Client commands are
//! validated and published on `hmi/command`; sessions never touch the
//! control loop directly.

pub mod protocol;
pub mod telemetry;

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use racesup_core::bus::{monotonic_ns, topics, Bus, BusError, Node, NodeRegistration, OverflowPolicy, SubscribeOptions};
use racesup_core::model::{AsEvent, AsEventMsg, HmiCommand, HmiCommandKind, Payload};
use tungstenite::{Message, WebSocket};

use protocol::{clamp_rate, parse_client, Body, ServerMessage, DEFAULT_RATE_HZ};
pub use telemetry::TelemetrySnapshot;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8765";

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("gateway socket: {0}")]
    Io(#[from] std::io::Error),
    #[error("gateway bus: {0}")]
    Bus(#[from] BusError),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub listen: String,
    pub default_rate_hz: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            listen: DEFAULT_LISTEN.into(),
            default_rate_hz: DEFAULT_RATE_HZ,
        }
    }
}

struct Shared {
    latest: Mutex<Arc<TelemetrySnapshot>>,
    node: Node,
    shutdown: AtomicBool,
    default_rate_hz: f64,
    clients: AtomicU64,
}

impl Shared {
    fn latest(&self) -> Arc<TelemetrySnapshot> {
        self.latest.lock().unwrap().clone()
    }
}

pub struct Gateway {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    sessions: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl Gateway {
    /// Binds the endpoint and attaches to `bus` as node `gateway`.
    pub fn start(bus: &Bus, cfg: &GatewayConfig) -> Result<Gateway, GatewayError> {
        let listener = TcpListener::bind(&cfg.listen)?;
        let addr = listener.local_addr()?;
        let node = bus.register_node(NodeRegistration::slave("gateway"))?;
        let sub = bus.subscribe_many(
            &telemetry::PATTERNS,
            SubscribeOptions {
                capacity: 4096,
                policy: OverflowPolicy::DropOldest,
            },
        )?;
        let shared = Arc::new(Shared {
            latest: Mutex::new(Arc::new(TelemetrySnapshot::default())),
            node,
            shutdown: AtomicBool::new(false),
            default_rate_hz: clamp_rate(cfg.default_rate_hz),
            clients: AtomicU64::new(0),
        });
        let sessions = Arc::new(Mutex::new(Vec::new()));

        let agg = {
            let shared = shared.clone();
            std::thread::Builder::new().name("gw-telemetry".into()).spawn(move || {
                let mut snap = TelemetrySnapshot::default();
                while !shared.shutdown.load(Ordering::Acquire) {
                    match sub.recv_timeout(Duration::from_millis(50)) {
                        Ok(Some(f)) => {
                            snap.apply(&f);
                            while let Some(f) = sub.try_recv() {
                                snap.apply(&f);
                            }
                            *shared.latest.lock().unwrap() = Arc::new(snap.clone());
                        }
                        Ok(None) => {}
                        Err(_) => break,
                    }
                }
            })?
        };
        let acceptor = {
            let shared = shared.clone();
            let sessions = sessions.clone();
            std::thread::Builder::new().name("gw-accept".into()).spawn(move || {
                for stream in listener.incoming() {
                    if shared.shutdown.load(Ordering::Acquire) {
                        break;
                    }
                    let stream = match stream {
                        Ok(s) => s,
                        Err(e) => {
                            log::warn!("gateway accept: {e}");
                            continue;
                        }
                    };
                    let n = shared.clients.fetch_add(1, Ordering::Relaxed) + 1;
                    let shared = shared.clone();
                    let h = std::thread::Builder::new()
                        .name(format!("gw-client-{n}"))
                        .spawn(move || {
                            if let Err(e) = session(stream, &shared, n) {
                                log::debug!("client {n}: {e}");
                            }
                        });
                    match h {
                        Ok(h) => {
                            let mut v = sessions.lock().unwrap();
                            v.retain(|h: &JoinHandle<()>| !h.is_finished());
                            v.push(h);
                        }
                        Err(e) => log::warn!("gateway session spawn: {e}"),
                    }
                }
            })?
        };
        log::info!("gateway listening on ws://{addr}");
        Ok(Gateway {
            addr,
            shared,
            threads: vec![agg, acceptor],
            sessions,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn snapshot(&self) -> Arc<TelemetrySnapshot> {
        self.shared.latest()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::AcqRel) {
            return;
        }
        // Wake the acceptor.
        let _ = TcpStream::connect(self.addr);
        for h in self.threads.drain(..) {
            let _ = h.join();
        }
        for h in self.sessions.lock().unwrap().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop();
    }
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn send(ws: &mut WebSocket<TcpStream>, msg: Message) -> Result<(), tungstenite::Error> {
    match ws.send(msg) {
        Err(e) if would_block(&e) => Ok(()),
        r => r,
    }
}

/// Serves one client. Telemetry is credit-based: after each snapshot the
/// session sends a ping and waits for its pong before the next one, so a
/// stalled client has at most one snapshot in flight and resumes with the
/// latest.
fn session(stream: TcpStream, shared: &Shared, n: u64) -> Result<(), tungstenite::Error> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    stream.set_write_timeout(Some(Duration::from_secs(1)))?;
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    let default_client = format!("ws-{n}");
    let mut period = Duration::from_secs_f64(1.0 / shared.default_rate_hz);
    let mut next_due = Instant::now();
    let mut ping_seq: u64 = 0;
    let mut awaiting_pong = false;
    loop {
        if shared.shutdown.load(Ordering::Acquire) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        let now = Instant::now();
        if !awaiting_pong && now >= next_due {
            let snap = shared.latest();
            send(&mut ws, Message::Text(ServerMessage::Telemetry(&snap).to_text()))?;
            ping_seq += 1;
            send(&mut ws, Message::Ping(ping_seq.to_be_bytes().to_vec()))?;
            awaiting_pong = true;
            next_due += period;
            if next_due <= now {
                // Behind schedule: skip the missed slots rather than burst.
                next_due = now + period;
            }
        }
        let wait = if awaiting_pong {
            Duration::from_millis(5)
        } else {
            next_due.saturating_duration_since(Instant::now())
        };
        ws.get_mut()
            .set_read_timeout(Some(wait.clamp(Duration::from_millis(1), Duration::from_millis(20))))?;
        match ws.read() {
            Ok(Message::Text(text)) => {
                for reply in handle_text(&text, shared, &default_client, &mut period) {
                    send(&mut ws, Message::Text(reply))?;
                }
            }
            Ok(Message::Pong(p)) => {
                if p == ping_seq.to_be_bytes() {
                    awaiting_pong = false;
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(e) if would_block(&e) => {
                let _ = ws.flush();
            }
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
    }
}

/// Applies one client message and returns the replies.
fn handle_text(text: &str, shared: &Shared, default_client: &str, period: &mut Duration) -> Vec<String> {
    let received_ns = monotonic_ns();
    let msg = match parse_client(text) {
        Ok(m) => m,
        Err(r) => {
            log::info!("{default_client}: rejected message: {}", r.reason);
            return vec![ServerMessage::Rejected { id: r.id, reason: r.reason }.to_text()];
        }
    };
    match msg.body {
        Body::SetTelemetryRate(r) => {
            let rate = clamp_rate(r);
            *period = Duration::from_secs_f64(1.0 / rate);
            vec![ServerMessage::TelemetryRate { id: msg.id, rate_hz: rate }.to_text()]
        }
        Body::Hmi(m) => {
            let kind = match m.into_kind() {
                Ok(k) => k,
                Err(e) => return vec![ServerMessage::Rejected { id: msg.id, reason: e.0 }.to_text()],
            };
            let client_id = msg.client_id.unwrap_or_else(|| default_client.to_string());
            match publish_command(&shared.node, kind, client_id, received_ns) {
                Ok(name) => vec![ServerMessage::Ack { id: msg.id, command: name }.to_text()],
                Err(e) => vec![ServerMessage::Rejected {
                    id: msg.id,
                    reason: format!("not delivered: {e}"),
                }
                .to_text()],
            }
        }
    }
}

/// Publishes a validated command. An e-stop also goes straight out as an
/// `EStop` event ahead of the command record.
pub fn publish_command(node: &Node, kind: HmiCommandKind, client_id: String, now_ns: u64) -> Result<&'static str, BusError> {
    if kind == HmiCommandKind::Estop {
        let ev = AsEventMsg {
            event: AsEvent::EStop,
            timestamp_ns: now_ns,
        };
        node.publish(topics::SUPERVISOR_EVENT, ev.to_payload())?;
    }
    let name = kind.type_name();
    log::info!("hmi {name} from {client_id}");
    let cmd = HmiCommand {
        kind,
        client_id,
        timestamp_ns: now_ns,
    };
    node.publish(topics::HMI_COMMAND, cmd.to_payload())?;
    Ok(name)
}
