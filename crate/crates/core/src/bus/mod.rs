//! Publish/subscribe transport.
//!
//! A [`Bus`] routes [`Frame`]s from publishers to every subscription whose
//! [`TopicPattern`] matches. One bus instance per process; the master's bus
//! can additionally [`listen`](Bus::listen) on a TCP endpoint so slave
//! processes ([`Bus::connect`]) exchange frames over the wire protocol.
//!
//! Delivery is at-most-once: subscription queues are bounded and, by default,
//! drop the oldest frame on overflow. Ordering is FIFO per (publisher, topic).

mod frame;
mod registry;
mod topic;
mod wire;

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::{Duration, Instant};

pub use frame::{decode_frame, encode_frame, DecodeError, Frame, FLAG_COMPRESSED, MAGIC, VERSION};
pub use registry::{NodeRegistration, NodeRole, Roster};
pub use topic::{validate_topic, TopicPattern};

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

/// Topic names shared across modules.
pub mod topics {
    pub const SENSOR_POSE: &str = "sensor/pose";
    pub const SENSOR_WHEELSPEED: &str = "sensor/wheelspeed";
    pub const ESTIMATOR_STATE: &str = "estimator/state";
    pub const DECISION_SELECTED: &str = "decision/selected";
    pub const ADAPTER_ACTUATION: &str = "adapter/actuation";
    pub const SUPERVISOR_STATE: &str = "supervisor/state";
    pub const SUPERVISOR_EVENT: &str = "supervisor/event";
    pub const SUPERVISOR_MARGIN: &str = "supervisor/margin";
    pub const SUPERVISOR_MISSION: &str = "supervisor/mission";
    pub const HMI_COMMAND: &str = "hmi/command";
    pub const TELEMETRY_LAP: &str = "telemetry/lap";
    pub const TELEMETRY_SIM: &str = "telemetry/sim";
    pub const TELEMETRY_RESOURCE: &str = "telemetry/resource";
    pub const TELEMETRY_SCORES: &str = "telemetry/scores";

    pub fn pipeline_proposal(id: &str) -> String {
        format!("pipeline/{id}/proposal")
    }

    pub fn pipeline_heartbeat(id: &str) -> String {
        format!("pipeline/{id}/heartbeat")
    }

    pub fn pipeline_health(id: &str) -> String {
        format!("pipeline/{id}/health")
    }

    pub fn unit_health(id: &str) -> String {
        format!("unit/{id}/health")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BusError {
    #[error("bus is shut down")]
    Shutdown,
    #[error("invalid topic {0}")]
    InvalidTopic(String),
    #[error("invalid pattern {0}")]
    InvalidPattern(String),
    #[error("topic of {0} octets exceeds the 65535-octet limit")]
    TopicTooLong(usize),
    #[error("payload of {0} octets exceeds the 2^32-1 limit")]
    PayloadTooLong(usize),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("bus already has a master; rejected {0:?}")]
    SecondMaster(String),
    #[error("registration failed: {0}")]
    Registration(String),
    #[error("transport error: {0}")]
    Io(String),
}

impl From<std::io::Error> for BusError {
    fn from(e: std::io::Error) -> Self {
        BusError::Io(e.to_string())
    }
}

/// Monotonic clock in nanoseconds, comparable across processes on one host.
pub fn monotonic_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: ts is a valid, writable timespec.
    unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverflowPolicy {
    DropOldest,
    /// Publishers wait for room. Used where completeness is required (logging).
    Block,
}

#[derive(Debug, Clone, Copy)]
pub struct SubscribeOptions {
    pub capacity: usize,
    pub policy: OverflowPolicy,
}

impl Default for SubscribeOptions {
    fn default() -> Self {
        SubscribeOptions {
            capacity: DEFAULT_QUEUE_CAPACITY,
            policy: OverflowPolicy::DropOldest,
        }
    }
}

pub(crate) struct Queue {
    patterns: Mutex<Vec<TopicPattern>>,
    frames: Mutex<VecDeque<Frame>>,
    readable: Condvar,
    writable: Condvar,
    capacity: usize,
    policy: OverflowPolicy,
    overflow: AtomicU64,
    closed: AtomicBool,
}

impl Queue {
    fn new(patterns: Vec<TopicPattern>, opts: SubscribeOptions) -> Self {
        Queue {
            patterns: Mutex::new(patterns),
            frames: Mutex::new(VecDeque::new()),
            readable: Condvar::new(),
            writable: Condvar::new(),
            capacity: opts.capacity.max(1),
            policy: opts.policy,
            overflow: AtomicU64::new(0),
            closed: AtomicBool::new(false),
        }
    }

    fn matches(&self, topic: &str) -> bool {
        self.patterns.lock().unwrap().iter().any(|p| p.matches(topic))
    }

    pub(crate) fn add_pattern(&self, p: TopicPattern) {
        self.patterns.lock().unwrap().push(p);
    }

    fn push(&self, frame: Frame) {
        let mut q = self.frames.lock().unwrap();
        while q.len() >= self.capacity {
            if self.closed.load(Ordering::Acquire) {
                return;
            }
            match self.policy {
                OverflowPolicy::DropOldest => {
                    q.pop_front();
                    self.overflow.fetch_add(1, Ordering::Relaxed);
                }
                OverflowPolicy::Block => {
                    q = self
                        .writable
                        .wait_timeout(q, Duration::from_millis(50))
                        .unwrap()
                        .0;
                }
            }
        }
        q.push_back(frame);
        drop(q);
        self.readable.notify_one();
    }

    fn pop_timeout(&self, timeout: Option<Duration>) -> Result<Option<Frame>, BusError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut q = self.frames.lock().unwrap();
        loop {
            if let Some(f) = q.pop_front() {
                drop(q);
                self.writable.notify_one();
                return Ok(Some(f));
            }
            if self.closed.load(Ordering::Acquire) {
                return Err(BusError::Shutdown);
            }
            match deadline {
                None => q = self.readable.wait(q).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Ok(None);
                    }
                    q = self.readable.wait_timeout(q, d - now).unwrap().0;
                }
            }
        }
    }

    pub(crate) fn close(&self) {
        self.closed.store(true, Ordering::Release);
        // Take the lock so no waiter misses the wakeup.
        let _g = self.frames.lock().unwrap();
        self.readable.notify_all();
        self.writable.notify_all();
    }
}

/// Receiving end of a subscription. Frames arrive in publication order per
/// (publisher, topic). Dropping the handle unsubscribes.
pub struct Subscription {
    queue: Arc<Queue>,
}

impl Subscription {
    pub fn pattern(&self) -> TopicPattern {
        self.queue.patterns.lock().unwrap()[0].clone()
    }

    pub fn recv(&self) -> Result<Frame, BusError> {
        self.queue.pop_timeout(None).map(|f| f.expect("untimed pop"))
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Frame>, BusError> {
        self.queue.pop_timeout(Some(timeout))
    }

    pub fn try_recv(&self) -> Option<Frame> {
        self.queue.pop_timeout(Some(Duration::ZERO)).ok().flatten()
    }

    /// Everything currently queued, oldest first.
    pub fn drain(&self) -> Vec<Frame> {
        let mut q = self.queue.frames.lock().unwrap();
        let out: Vec<Frame> = q.drain(..).collect();
        drop(q);
        self.queue.writable.notify_all();
        out
    }

    pub fn overflow_count(&self) -> u64 {
        self.queue.overflow.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.queue.frames.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.queue.close();
    }
}

pub(crate) struct Inner {
    subs: Mutex<Vec<Arc<Queue>>>,
    roster: Mutex<Roster>,
    shutdown: AtomicBool,
    /// Set on slave buses: frames published locally are also sent upstream.
    uplink: Mutex<Option<Arc<wire::Uplink>>>,
    /// Set on a listening master: connected slave peers.
    peers: Mutex<Vec<Arc<wire::Peer>>>,
    listen_addr: Mutex<Option<std::net::SocketAddr>>,
}

impl Inner {
    fn deliver_local(&self, frame: &Frame) {
        let targets: Vec<Arc<Queue>> = {
            let mut subs = self.subs.lock().unwrap();
            subs.retain(|q| !q.closed.load(Ordering::Acquire));
            subs.iter().filter(|q| q.matches(&frame.topic)).cloned().collect()
        };
        for q in targets {
            q.push(frame.clone());
        }
    }

    /// Delivery to connected slaves, skipping the one the frame came from.
    fn deliver_peers(&self, frame: &Frame, from: Option<&str>) {
        let peers: Vec<Arc<wire::Peer>> = self.peers.lock().unwrap().clone();
        for p in peers {
            if Some(p.node_id.as_str()) == from {
                continue;
            }
            if p.queue.matches(&frame.topic) {
                p.queue.push(frame.clone());
            }
        }
    }

    pub(crate) fn route(&self, frame: &Frame, from_peer: Option<&str>) {
        self.deliver_local(frame);
        self.deliver_peers(frame, from_peer);
    }
}

/// Shared handle to a bus instance. Cheap to clone.
#[derive(Clone)]
pub struct Bus {
    inner: Arc<Inner>,
}

impl Default for Bus {
    fn default() -> Self {
        Self::new()
    }
}

impl Bus {
    pub fn new() -> Self {
        Bus {
            inner: Arc::new(Inner {
                subs: Mutex::new(Vec::new()),
                roster: Mutex::new(Roster::default()),
                shutdown: AtomicBool::new(false),
                uplink: Mutex::new(None),
                peers: Mutex::new(Vec::new()),
                listen_addr: Mutex::new(None),
            }),
        }
    }

    pub(crate) fn inner(&self) -> &Arc<Inner> {
        &self.inner
    }

    pub(crate) fn downgrade(&self) -> Weak<Inner> {
        Arc::downgrade(&self.inner)
    }

    pub fn is_shutdown(&self) -> bool {
        self.inner.shutdown.load(Ordering::Acquire)
    }

    fn check_open(&self) -> Result<(), BusError> {
        if self.is_shutdown() {
            Err(BusError::Shutdown)
        } else {
            Ok(())
        }
    }

    /// Adds a node to this bus's roster and returns its publishing handle.
    pub fn register_node(&self, reg: NodeRegistration) -> Result<Node, BusError> {
        self.check_open()?;
        let node_id = reg.node_id.clone();
        self.inner.roster.lock().unwrap().insert(reg)?;
        Ok(Node {
            bus: self.clone(),
            node_id,
            seqs: Mutex::new(HashMap::new()),
        })
    }

    pub fn roster(&self) -> Vec<NodeRegistration> {
        self.inner.roster.lock().unwrap().list()
    }

    pub fn has_node(&self, node_id: &str) -> bool {
        self.inner.roster.lock().unwrap().contains(node_id)
    }

    pub(crate) fn roster_insert(&self, reg: NodeRegistration) -> Result<(), BusError> {
        self.inner.roster.lock().unwrap().insert(reg)
    }

    pub(crate) fn roster_remove(&self, node_id: &str) {
        self.inner.roster.lock().unwrap().remove(node_id);
    }

    pub fn subscribe(&self, pattern: &str) -> Result<Subscription, BusError> {
        self.subscribe_with(pattern, SubscribeOptions::default())
    }

    pub fn subscribe_with(
        &self,
        pattern: &str,
        opts: SubscribeOptions,
    ) -> Result<Subscription, BusError> {
        self.check_open()?;
        let pattern = TopicPattern::parse(pattern)?;
        let queue = Arc::new(Queue::new(vec![pattern.clone()], opts));
        self.inner.subs.lock().unwrap().push(queue.clone());
        if let Some(up) = self.inner.uplink.lock().unwrap().clone() {
            up.subscribe_remote(&pattern)?;
        }
        Ok(Subscription { queue })
    }

    /// One queue fed by several patterns, so frames on different topics keep
    /// their relative arrival order.
    pub fn subscribe_many(
        &self,
        patterns: &[&str],
        opts: SubscribeOptions,
    ) -> Result<Subscription, BusError> {
        self.check_open()?;
        let parsed = patterns
            .iter()
            .map(|p| TopicPattern::parse(p))
            .collect::<Result<Vec<_>, _>>()?;
        if parsed.is_empty() {
            return Err(BusError::InvalidPattern(String::new()));
        }
        let queue = Arc::new(Queue::new(parsed.clone(), opts));
        self.inner.subs.lock().unwrap().push(queue.clone());
        if let Some(up) = self.inner.uplink.lock().unwrap().clone() {
            for p in &parsed {
                up.subscribe_remote(p)?;
            }
        }
        Ok(Subscription { queue })
    }

    /// Injects an already-formed frame (seq and timestamp preserved). Used by
    /// replay and by the wire transport.
    pub fn publish_frame(&self, frame: Frame) -> Result<(), BusError> {
        self.check_open()?;
        validate_topic(&frame.topic)?;
        self.inner.route(&frame, None);
        let uplink = self.inner.uplink.lock().unwrap().clone();
        if let Some(up) = uplink {
            up.send(&frame)?;
        }
        Ok(())
    }

    /// Starts accepting slave connections on `endpoint` (e.g. `127.0.0.1:0`).
    /// Returns the bound address.
    pub fn listen(&self, endpoint: &str) -> Result<std::net::SocketAddr, BusError> {
        self.check_open()?;
        let addr = wire::listen(self, endpoint)?;
        *self.inner.listen_addr.lock().unwrap() = Some(addr);
        Ok(addr)
    }

    pub fn listen_addr(&self) -> Option<std::net::SocketAddr> {
        *self.inner.listen_addr.lock().unwrap()
    }

    /// Connects to a master bus as a slave node. The returned bus delivers
    /// frames locally and forwards every publication to the master.
    pub fn connect(endpoint: &str, reg: NodeRegistration) -> Result<(Bus, Node), BusError> {
        if reg.role != NodeRole::Slave {
            return Err(BusError::Registration("only slave nodes connect to a master".into()));
        }
        reg.validate()?;
        let bus = Bus::new();
        let uplink = wire::connect(&bus, endpoint, &reg)?;
        *bus.inner.uplink.lock().unwrap() = Some(uplink);
        let node = Node {
            bus: bus.clone(),
            node_id: reg.node_id.clone(),
            seqs: Mutex::new(HashMap::new()),
        };
        bus.inner.roster.lock().unwrap().insert(reg)?;
        Ok((bus, node))
    }

    pub fn shutdown(&self) {
        if self.inner.shutdown.swap(true, Ordering::AcqRel) {
            return;
        }
        for q in self.inner.subs.lock().unwrap().drain(..) {
            q.close();
        }
        for p in self.inner.peers.lock().unwrap().drain(..) {
            p.close();
        }
        if let Some(up) = self.inner.uplink.lock().unwrap().take() {
            up.close();
        }
        if let Some(addr) = self.inner.listen_addr.lock().unwrap().take() {
            // Wake the acceptor so it observes the shutdown flag.
            let _ = std::net::TcpStream::connect_timeout(&addr, Duration::from_millis(100));
        }
    }
}

/// A registered participant. Owns the per-topic sequence counters for the
/// frames it publishes.
pub struct Node {
    bus: Bus,
    node_id: String,
    seqs: Mutex<HashMap<String, u64>>,
}

impl Node {
    pub fn id(&self) -> &str {
        &self.node_id
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn publish(&self, topic: &str, payload: Vec<u8>) -> Result<u64, BusError> {
        self.bus.check_open()?;
        validate_topic(topic)?;
        // Sequence assignment and routing happen under one lock so frames of a
        // topic leave this node in seq order even with concurrent publishers.
        let mut seqs = self.seqs.lock().unwrap();
        let seq = seqs.entry(topic.to_string()).or_insert(0);
        *seq += 1;
        let frame = Frame::new(topic, *seq, monotonic_ns(), payload);
        let assigned = *seq;
        self.bus.publish_frame(frame)?;
        Ok(assigned)
    }

    pub fn subscribe(&self, pattern: &str) -> Result<Subscription, BusError> {
        self.bus.subscribe(pattern)
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.bus.roster_remove(&self.node_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn master() -> (Bus, Node) {
        let bus = Bus::new();
        let node = bus.register_node(NodeRegistration::master("m")).unwrap();
        (bus, node)
    }

    #[test]
    fn seq_is_monotonic_per_topic() {
        let (_bus, node) = master();
        let seqs: Vec<u64> = (0..3).map(|_| node.publish("a/b", vec![]).unwrap()).collect();
        assert_eq!(seqs, vec![1, 2, 3]);
        assert_eq!(node.publish("a/c", vec![]).unwrap(), 1);
    }

    #[test]
    fn one_segment_wildcard_delivery() {
        let (bus, node) = master();
        let one = bus.subscribe("vehicle/*").unwrap();
        let rest = bus.subscribe("vehicle/#").unwrap();
        node.publish("vehicle/state", vec![1]).unwrap();
        node.publish("vehicle/state/raw", vec![2]).unwrap();
        let got: Vec<u8> = one.drain().iter().map(|f| f.payload[0]).collect();
        assert_eq!(got, vec![1]);
        assert_eq!(rest.drain().len(), 2);
    }

    #[test]
    fn suffix_wildcard_delivery() {
        let (bus, node) = master();
        let sub = bus.subscribe("a/#").unwrap();
        node.publish("a/b/c", vec![]).unwrap();
        assert_eq!(sub.try_recv().unwrap().topic, "a/b/c");
    }

    #[test]
    fn drop_oldest_counts_overflow() {
        let (bus, node) = master();
        let sub = bus
            .subscribe_with(
                "x",
                SubscribeOptions {
                    capacity: 2,
                    policy: OverflowPolicy::DropOldest,
                },
            )
            .unwrap();
        for i in 0..3u8 {
            node.publish("x", vec![i]).unwrap();
        }
        assert_eq!(sub.overflow_count(), 1);
        let got: Vec<u8> = sub.drain().iter().map(|f| f.payload[0]).collect();
        assert_eq!(got, vec![1, 2]);
    }

    #[test]
    fn blocking_policy_loses_nothing() {
        let (bus, node) = master();
        let sub = bus
            .subscribe_with(
                "x",
                SubscribeOptions {
                    capacity: 4,
                    policy: OverflowPolicy::Block,
                },
            )
            .unwrap();
        let reader = thread::spawn(move || {
            let mut seen = Vec::new();
            while seen.len() < 500 {
                seen.push(sub.recv().unwrap().seq);
            }
            seen
        });
        for _ in 0..500 {
            node.publish("x", vec![]).unwrap();
        }
        let seen = reader.join().unwrap();
        assert_eq!(seen, (1..=500).collect::<Vec<_>>());
    }

    #[test]
    fn fifo_across_threads() {
        let (bus, node) = master();
        let node = Arc::new(node);
        let sub = bus.subscribe("#").unwrap();
        let handles: Vec<_> = ["p/a", "p/b"]
            .into_iter()
            .map(|t| {
                let node = node.clone();
                thread::spawn(move || {
                    for _ in 0..200 {
                        node.publish(t, vec![]).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let mut last: HashMap<String, u64> = HashMap::new();
        for f in sub.drain() {
            let prev = last.insert(f.topic.clone(), f.seq).unwrap_or(0);
            assert_eq!(f.seq, prev + 1);
        }
    }

    #[test]
    fn roster_and_second_master() {
        let (bus, _m) = master();
        let _s = bus.register_node(NodeRegistration::slave("s")).unwrap();
        let ids: Vec<String> = bus.roster().into_iter().map(|r| r.node_id).collect();
        assert_eq!(ids, vec!["m", "s"]);
        assert!(matches!(
            bus.register_node(NodeRegistration::master("m2")),
            Err(BusError::SecondMaster(_))
        ));
    }

    #[test]
    fn shutdown_rejects_publish_and_wakes_readers() {
        let (bus, node) = master();
        let sub = bus.subscribe("#").unwrap();
        let t = thread::spawn(move || sub.recv());
        thread::sleep(Duration::from_millis(20));
        bus.shutdown();
        assert_eq!(t.join().unwrap(), Err(BusError::Shutdown));
        assert_eq!(node.publish("a", vec![]), Err(BusError::Shutdown));
    }

    #[test]
    fn invalid_inputs() {
        let (bus, node) = master();
        assert!(matches!(bus.subscribe("a/#/b"), Err(BusError::InvalidPattern(_))));
        assert!(matches!(node.publish("a b", vec![]), Err(BusError::InvalidTopic(_))));
    }
}
