//! Stream transport between a master bus and its slaves.
//!
//! Control traffic uses reserved `$bus/...` topics and is never routed to
//! subscribers:
//!
//! - `$bus/hello`   slave → master, payload = encoded [`NodeRegistration`]
//! - `$bus/welcome` master → slave, empty payload
//! - `$bus/reject`  master → slave, payload = UTF-8 reason
//! - `$bus/sub`     slave → master, payload = UTF-8 pattern

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};

use super::{
    decode_frame, encode_frame, monotonic_ns, Bus, BusError, DecodeError, Frame, NodeRegistration,
    Queue, SubscribeOptions, TopicPattern,
};

const HELLO: &str = "$bus/hello";
const WELCOME: &str = "$bus/welcome";
const REJECT: &str = "$bus/reject";
const SUB: &str = "$bus/sub";

struct FrameReader {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl FrameReader {
    fn new(stream: TcpStream) -> Self {
        FrameReader {
            stream,
            buf: Vec::with_capacity(8192),
        }
    }

    /// `Ok(None)` on clean end-of-stream.
    fn next_frame(&mut self) -> Result<Option<Frame>, BusError> {
        let mut chunk = [0u8; 8192];
        loop {
            match decode_frame(&self.buf) {
                Ok((frame, n)) => {
                    self.buf.drain(..n);
                    return Ok(Some(frame));
                }
                Err(DecodeError::Incomplete { .. }) => {}
                Err(DecodeError::Corrupt(why)) => return Err(BusError::InvalidFrame(why)),
            }
            let n = match self.stream.read(&mut chunk) {
                Ok(n) => n,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            if n == 0 {
                return Ok(None);
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }
}

fn write_frame(stream: &mut TcpStream, frame: &Frame) -> Result<(), BusError> {
    let bytes = encode_frame(frame)?;
    stream.write_all(&bytes)?;
    Ok(())
}

fn control(topic: &str, payload: Vec<u8>) -> Frame {
    Frame::new(topic, 0, monotonic_ns(), payload)
}

/// Master-side state for one connected slave.
pub(crate) struct Peer {
    pub(crate) node_id: String,
    pub(crate) queue: Arc<Queue>,
    stream: TcpStream,
}

impl Peer {
    pub(crate) fn close(&self) {
        self.queue.close();
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }
}

pub(crate) fn listen(bus: &Bus, endpoint: &str) -> Result<SocketAddr, BusError> {
    let listener = TcpListener::bind(endpoint)?;
    let addr = listener.local_addr()?;
    let weak = bus.downgrade();
    thread::Builder::new()
        .name("bus-accept".into())
        .spawn(move || {
            for conn in listener.incoming() {
                let Some(inner) = weak.upgrade() else { break };
                let bus = Bus { inner };
                if bus.is_shutdown() {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let bus = bus.clone();
                        thread::spawn(move || serve_peer(bus, stream));
                    }
                    Err(e) => warn!("bus accept failed: {e}"),
                }
            }
        })?;
    Ok(addr)
}

fn serve_peer(bus: Bus, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let Ok(mut write_half) = stream.try_clone() else { return };
    let mut reader = FrameReader::new(stream);
    let reg = match reader.next_frame() {
        Ok(Some(f)) if f.topic == HELLO => NodeRegistration::decode(&f.payload),
        Ok(_) => return,
        Err(e) => {
            debug!("bus peer dropped before hello: {e}");
            return;
        }
    };
    let reg = match reg.and_then(|r| bus.roster_insert(r.clone()).map(|_| r)) {
        Ok(r) => r,
        Err(e) => {
            let _ = write_frame(&mut write_half, &control(REJECT, e.to_string().into_bytes()));
            return;
        }
    };
    if write_frame(&mut write_half, &control(WELCOME, Vec::new())).is_err() {
        bus.roster_remove(&reg.node_id);
        return;
    }
    let queue = Arc::new(Queue::new(reg.subscribed.clone(), SubscribeOptions::default()));
    let peer = Arc::new(Peer {
        node_id: reg.node_id.clone(),
        queue: queue.clone(),
        stream: write_half.try_clone().expect("clone peer stream"),
    });
    bus.inner().peers.lock().unwrap().push(peer.clone());

    let writer = thread::spawn(move || {
        while let Ok(Some(frame)) = queue.pop_timeout(None) {
            if write_frame(&mut write_half, &frame).is_err() {
                break;
            }
        }
    });

    loop {
        match reader.next_frame() {
            Ok(Some(f)) if f.topic == SUB => match std::str::from_utf8(&f.payload)
                .map_err(|e| BusError::InvalidPattern(e.to_string()))
                .and_then(TopicPattern::parse)
            {
                Ok(p) => peer.queue.add_pattern(p),
                Err(e) => warn!("peer {} sent bad subscription: {e}", reg.node_id),
            },
            Ok(Some(f)) if f.topic.starts_with("$bus/") => {}
            Ok(Some(f)) => {
                if bus.is_shutdown() {
                    break;
                }
                bus.inner().route(&f, Some(&reg.node_id));
            }
            Ok(None) => break,
            Err(e) => {
                debug!("peer {} disconnected: {e}", reg.node_id);
                break;
            }
        }
    }
    peer.close();
    bus.inner()
        .peers
        .lock()
        .unwrap()
        .retain(|p| !Arc::ptr_eq(p, &peer));
    bus.roster_remove(&reg.node_id);
    let _ = writer.join();
}

/// Slave-side connection to the master.
pub(crate) struct Uplink {
    stream: Mutex<TcpStream>,
    closed: AtomicBool,
}

impl Uplink {
    pub(crate) fn send(&self, frame: &Frame) -> Result<(), BusError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(BusError::Shutdown);
        }
        let mut s = self.stream.lock().unwrap();
        write_frame(&mut s, frame)
    }

    pub(crate) fn subscribe_remote(&self, pattern: &TopicPattern) -> Result<(), BusError> {
        self.send(&control(SUB, pattern.as_str().as_bytes().to_vec()))
    }

    pub(crate) fn close(&self) {
        self.closed.store(true, Ordering::Release);
        let _ = self
            .stream
            .lock()
            .unwrap()
            .shutdown(std::net::Shutdown::Both);
    }
}

pub(crate) fn connect(
    bus: &Bus,
    endpoint: &str,
    reg: &NodeRegistration,
) -> Result<Arc<Uplink>, BusError> {
    let mut stream = TcpStream::connect(endpoint)?;
    stream.set_nodelay(true)?;
    write_frame(&mut stream, &control(HELLO, reg.encode()))?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut reader = FrameReader::new(stream.try_clone()?);
    match reader.next_frame()? {
        Some(f) if f.topic == WELCOME => {}
        Some(f) if f.topic == REJECT => {
            return Err(BusError::Registration(
                String::from_utf8_lossy(&f.payload).into_owned(),
            ))
        }
        _ => return Err(BusError::Registration("no answer from master".into())),
    }
    reader.stream.set_read_timeout(None)?;
    let uplink = Arc::new(Uplink {
        stream: Mutex::new(stream),
        closed: AtomicBool::new(false),
    });
    let weak = bus.downgrade();
    let up = uplink.clone();
    thread::Builder::new()
        .name("bus-uplink".into())
        .spawn(move || {
            loop {
                let frame = match reader.next_frame() {
                    Ok(Some(f)) => f,
                    _ => break,
                };
                let Some(inner) = weak.upgrade() else { break };
                inner.deliver_local(&frame);
            }
            // Master is gone; a slave without its master has nothing to do.
            up.closed.store(true, Ordering::Release);
            if let Some(inner) = weak.upgrade() {
                Bus { inner }.shutdown();
            }
        })?;
    Ok(uplink)
}
