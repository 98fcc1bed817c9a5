//! Uniform lifecycle for drivers, modules and pipelines: spawn, health,
//! restart with backoff, and stop.
//!
//! Out-of-process units run in their own process group so that stopping a
//! unit also removes anything it forked. In-process units run on a thread
//! with a cooperative stop flag.

mod lifecycle;

use std::collections::BTreeMap;
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::bus::{topics, Bus, Node};
use crate::model::codec::Payload;
use crate::model::{HealthReport, HealthStatus, Heartbeat, SupervisorNotice};

pub use lifecycle::{
    derive_health, lifecycle_step, transition_allowed, HealthPolicy, LifecycleEvent, RestartPolicy, UnitKind,
    UnitStatus,
};

#[derive(Debug, thiserror::Error)]
pub enum HandlerError {
    #[error("unit {0:?} already exists and is not stopped")]
    Duplicate(String),
    #[error("unknown unit {0:?}")]
    UnknownUnit(String),
    #[error("executable {0} not found")]
    ExecutableMissing(PathBuf),
    #[error("node {0:?} is unreachable")]
    NodeUnreachable(String),
    #[error("invalid unit spec: {0}")]
    InvalidSpec(String),
    #[error("spawn failed: {0}")]
    Spawn(#[from] std::io::Error),
}

/// Handed to in-process units.
#[derive(Clone)]
pub struct UnitContext {
    pub unit_id: String,
    pub stop: Arc<AtomicBool>,
}

impl UnitContext {
    pub fn should_stop(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }
}

pub type InProcessFn = Arc<dyn Fn(UnitContext) + Send + Sync>;

#[derive(Clone)]
pub enum Launch {
    Process {
        exec: PathBuf,
        args: Vec<String>,
        /// Passed as `--config <path>`.
        config: Option<PathBuf>,
    },
    InProcess(InProcessFn),
}

impl std::fmt::Debug for Launch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Launch::Process { exec, args, config } => f
                .debug_struct("Process")
                .field("exec", exec)
                .field("args", args)
                .field("config", config)
                .finish(),
            Launch::InProcess(_) => f.write_str("InProcess"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeartbeatSource {
    /// The unit publishes `pipeline/<id>/heartbeat` frames.
    Bus,
    /// Liveness of the process or thread stands in for a heartbeat.
    Synthetic,
}

#[derive(Debug, Clone)]
pub struct UnitSpec {
    pub unit_id: String,
    pub kind: UnitKind,
    pub launch: Launch,
    /// Placement; `None` is the local host.
    pub node: Option<String>,
    pub restart: RestartPolicy,
    pub health: HealthPolicy,
    pub heartbeat: HeartbeatSource,
}

impl UnitSpec {
    pub fn new(unit_id: impl Into<String>, kind: UnitKind, launch: Launch) -> Self {
        UnitSpec {
            unit_id: unit_id.into(),
            kind,
            launch,
            node: None,
            restart: RestartPolicy::default(),
            health: HealthPolicy::default(),
            heartbeat: HeartbeatSource::Bus,
        }
    }

    pub fn health_topic(&self) -> String {
        match self.kind {
            UnitKind::Pipeline => topics::pipeline_health(&self.unit_id),
            UnitKind::Driver | UnitKind::Module => topics::unit_health(&self.unit_id),
        }
    }
}

enum Running {
    Process(Child),
    Thread {
        handle: Option<JoinHandle<()>>,
        stop: Arc<AtomicBool>,
    },
}

impl Running {
    fn alive(&mut self) -> bool {
        match self {
            Running::Process(c) => matches!(c.try_wait(), Ok(None)),
            Running::Thread { handle, .. } => handle.as_ref().is_some_and(|h| !h.is_finished()),
        }
    }

    fn pid(&self) -> Option<u32> {
        match self {
            Running::Process(c) => Some(c.id()),
            Running::Thread { .. } => None,
        }
    }
}

struct Unit {
    spec: UnitSpec,
    status: UnitStatus,
    running: Option<Running>,
    spawned_ns: u64,
    last_heartbeat_ns: Option<u64>,
    self_status: HealthStatus,
    resource_degraded: bool,
    restart_count: u32,
    restart_due_ns: Option<u64>,
    permanently_dead: bool,
    transitions: Vec<(UnitStatus, UnitStatus)>,
}

impl Unit {
    fn apply(&mut self, ev: LifecycleEvent) {
        let next = lifecycle_step(self.status, ev);
        if next != self.status {
            log::debug!("unit {}: {:?} -> {:?}", self.spec.unit_id, self.status, next);
            self.transitions.push((self.status, next));
            self.status = next;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RestartAction {
    None,
    /// Waiting out the backoff for restart number `attempt` (1-based).
    Scheduled { attempt: u32, due_ns: u64 },
    Restarted { attempt: u32 },
    PermanentlyDead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopOutcome {
    AlreadyStopped,
    Graceful,
    /// Deadline passed; the process group was killed, or the thread was
    /// abandoned.
    Forced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitSnapshot {
    pub unit_id: String,
    pub kind: UnitKind,
    pub status: UnitStatus,
    pub restart_count: u32,
    pub pid: Option<u32>,
}

/// Owns every managed unit. All timestamps are supplied by the caller so the
/// same code runs against wall time or simulated time.
pub struct Handlers {
    units: BTreeMap<String, Unit>,
    bus_endpoint: Option<String>,
    local_node: String,
    publisher: Option<Node>,
}

impl Handlers {
    pub fn new(local_node: impl Into<String>) -> Self {
        Handlers {
            units: BTreeMap::new(),
            bus_endpoint: None,
            local_node: local_node.into(),
            publisher: None,
        }
    }

    /// Endpoint injected into out-of-process units as `--bus-endpoint`.
    pub fn with_bus_endpoint(mut self, endpoint: impl Into<String>) -> Self {
        self.bus_endpoint = Some(endpoint.into());
        self
    }

    /// Node used to publish health reports and supervisor notices.
    pub fn with_publisher(mut self, node: Node) -> Self {
        self.publisher = Some(node);
        self
    }

    fn unit(&mut self, id: &str) -> Result<&mut Unit, HandlerError> {
        self.units.get_mut(id).ok_or_else(|| HandlerError::UnknownUnit(id.to_string()))
    }

    fn check_placement(&self, spec: &UnitSpec, bus: Option<&Bus>) -> Result<(), HandlerError> {
        match spec.node.as_deref() {
            None => Ok(()),
            Some(n) if n == self.local_node => Ok(()),
            Some(n) => {
                // Remote hosts would need a launch agent registered on the bus;
                // none exists, so any other placement is unreachable.
                let known = bus.is_some_and(|b| b.has_node(n));
                log::warn!("unit {}: placement on {n:?} (registered: {known})", spec.unit_id);
                Err(HandlerError::NodeUnreachable(n.to_string()))
            }
        }
    }

    /// Registers and starts a unit. Re-spawning a Stopped unit replaces its
    /// spec.
    pub fn spawn(&mut self, spec: UnitSpec, now_ns: u64) -> Result<(), HandlerError> {
        spec.health.validate().map_err(HandlerError::InvalidSpec)?;
        if spec.unit_id.is_empty() {
            return Err(HandlerError::InvalidSpec("empty unit id".into()));
        }
        if let Some(u) = self.units.get(&spec.unit_id) {
            if u.status != UnitStatus::Stopped {
                return Err(HandlerError::Duplicate(spec.unit_id));
            }
        }
        self.check_placement(&spec, self.publisher.as_ref().map(|n| n.bus()))?;
        let id = spec.unit_id.clone();
        let restart_count = self.units.get(&id).map_or(0, |u| u.restart_count);
        self.units.insert(
            id.clone(),
            Unit {
                spec,
                status: UnitStatus::Stopped,
                running: None,
                spawned_ns: now_ns,
                last_heartbeat_ns: None,
                self_status: HealthStatus::Healthy,
                resource_degraded: false,
                restart_count,
                restart_due_ns: None,
                permanently_dead: false,
                transitions: Vec::new(),
            },
        );
        self.start(&id, now_ns)
    }

    fn start(&mut self, id: &str, now_ns: u64) -> Result<(), HandlerError> {
        let endpoint = self.bus_endpoint.clone();
        let u = self.unit(id)?;
        let running = match &u.spec.launch {
            Launch::Process { exec, args, config } => {
                if !exec_exists(exec) {
                    return Err(HandlerError::ExecutableMissing(exec.clone()));
                }
                let mut cmd = Command::new(exec);
                cmd.args(args);
                if u.spec.kind == UnitKind::Pipeline {
                    cmd.arg("--id").arg(id);
                }
                if let Some(ep) = &endpoint {
                    cmd.arg("--bus-endpoint").arg(ep);
                }
                if let Some(c) = config {
                    cmd.arg("--config").arg(c);
                }
                cmd.stdin(Stdio::null()).stdout(Stdio::null()).process_group(0);
                Running::Process(cmd.spawn()?)
            }
            Launch::InProcess(f) => {
                let stop = Arc::new(AtomicBool::new(false));
                let ctx = UnitContext {
                    unit_id: id.to_string(),
                    stop: stop.clone(),
                };
                let f = f.clone();
                let handle = std::thread::Builder::new()
                    .name(format!("unit-{id}"))
                    .spawn(move || f(ctx))?;
                Running::Thread {
                    handle: Some(handle),
                    stop,
                }
            }
        };
        u.running = Some(running);
        u.spawned_ns = now_ns;
        u.last_heartbeat_ns = None;
        u.self_status = HealthStatus::Healthy;
        u.apply(LifecycleEvent::Spawned);
        Ok(())
    }

    /// Records a heartbeat received at `now_ns`. Unknown senders are ignored.
    pub fn record_heartbeat(&mut self, hb: &Heartbeat, now_ns: u64) {
        if let Some(u) = self.units.get_mut(&hb.unit_id) {
            if u.running.is_some() {
                u.last_heartbeat_ns = Some(now_ns);
                u.self_status = hb.self_status;
                if u.status == UnitStatus::Starting {
                    u.apply(LifecycleEvent::Health(HealthStatus::Healthy));
                }
            }
        }
    }

    /// Flags a unit as degraded by resource pressure; cleared with `false`.
    pub fn set_resource_degraded(&mut self, id: &str, degraded: bool) -> Result<(), HandlerError> {
        self.unit(id)?.resource_degraded = degraded;
        Ok(())
    }

    /// Evaluates and publishes the health of one unit.
    pub fn health_tick(&mut self, id: &str, now_ns: u64) -> Result<HealthReport, HandlerError> {
        let u = self.unit(id)?;
        let report = evaluate(u, now_ns);
        if let Some(node) = &self.publisher {
            let topic = self.units[id].spec.health_topic();
            if let Err(e) = node.publish(&topic, report.to_payload()) {
                log::warn!("health publish for {id} failed: {e}");
            }
        }
        Ok(report)
    }

    pub fn health_tick_all(&mut self, now_ns: u64) -> Vec<HealthReport> {
        let ids: Vec<String> = self
            .units
            .iter()
            .filter(|(_, u)| u.status != UnitStatus::Stopped)
            .map(|(k, _)| k.clone())
            .collect();
        ids.iter().filter_map(|id| self.health_tick(id, now_ns).ok()).collect()
    }

    /// Restarts a Dead unit once its backoff has elapsed, or declares it
    /// permanently dead when the restart budget is spent.
    pub fn restart_if_needed(&mut self, id: &str, now_ns: u64) -> Result<RestartAction, HandlerError> {
        let u = self.unit(id)?;
        if u.status != UnitStatus::Dead || u.permanently_dead {
            return Ok(RestartAction::None);
        }
        if u.restart_count >= u.spec.restart.max_restarts {
            u.permanently_dead = true;
            terminate(u, Duration::ZERO);
            log::warn!("unit {id} permanently dead after {} restarts", u.restart_count);
            if let Some(node) = &self.publisher {
                let notice = SupervisorNotice::UnitPermanentlyDead { unit_id: id.to_string() };
                if let Err(e) = node.publish(topics::SUPERVISOR_EVENT, notice.to_payload()) {
                    log::warn!("notice publish failed: {e}");
                }
            }
            return Ok(RestartAction::PermanentlyDead);
        }
        let attempt = u.restart_count + 1;
        let due_ns = match u.restart_due_ns {
            Some(d) => d,
            None => {
                terminate(u, Duration::ZERO);
                let wait_ns = (u.spec.restart.backoff_ms_for(u.restart_count) * 1e6) as u64;
                let d = now_ns + wait_ns;
                u.restart_due_ns = Some(d);
                d
            }
        };
        if now_ns < due_ns {
            return Ok(RestartAction::Scheduled { attempt, due_ns });
        }
        u.restart_due_ns = None;
        u.restart_count = attempt;
        u.apply(LifecycleEvent::Stopped);
        self.start(id, now_ns)?;
        log::info!("unit {id} restarted (attempt {attempt})");
        Ok(RestartAction::Restarted { attempt })
    }

    /// Asks the unit to stop and forces it after `deadline`.
    pub fn stop(&mut self, id: &str, deadline: Duration) -> Result<StopOutcome, HandlerError> {
        let u = self.unit(id)?;
        if u.status == UnitStatus::Stopped && u.running.is_none() {
            return Ok(StopOutcome::AlreadyStopped);
        }
        let outcome = terminate(u, deadline);
        u.restart_due_ns = None;
        u.apply(LifecycleEvent::Stopped);
        Ok(outcome)
    }

    pub fn stop_all(&mut self, deadline: Duration) {
        let ids: Vec<String> = self.units.keys().cloned().collect();
        for id in ids {
            if let Err(e) = self.stop(&id, deadline) {
                log::warn!("stopping {id}: {e}");
            }
        }
    }

    /// Kills a unit without telling the lifecycle; the next health tick
    /// discovers the death. Used for fault injection. Threads cannot be
    /// killed, so they are asked to stop and joined for up to a second.
    pub fn kill(&mut self, id: &str) -> Result<bool, HandlerError> {
        let u = self.unit(id)?;
        match &mut u.running {
            Some(Running::Process(c)) => {
                signal_group(c.id(), libc::SIGKILL);
                let _ = c.wait();
                Ok(true)
            }
            Some(Running::Thread { handle, stop }) => {
                stop.store(true, Ordering::Release);
                let t0 = Instant::now();
                while handle.as_ref().is_some_and(|h| !h.is_finished()) {
                    if t0.elapsed() > Duration::from_secs(1) {
                        return Ok(false);
                    }
                    std::thread::sleep(Duration::from_millis(1));
                }
                if let Some(h) = handle.take() {
                    let _ = h.join();
                }
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Whether the unit's process or thread is currently running.
    pub fn is_alive(&mut self, id: &str) -> bool {
        self.units
            .get_mut(id)
            .and_then(|u| u.running.as_mut())
            .is_some_and(Running::alive)
    }

    pub fn status(&self, id: &str) -> Option<UnitStatus> {
        self.units.get(id).map(|u| u.status)
    }

    pub fn pid(&self, id: &str) -> Option<u32> {
        self.units.get(id).and_then(|u| u.running.as_ref()).and_then(Running::pid)
    }

    pub fn restart_count(&self, id: &str) -> Option<u32> {
        self.units.get(id).map(|u| u.restart_count)
    }

    pub fn is_permanently_dead(&self, id: &str) -> bool {
        self.units.get(id).is_some_and(|u| u.permanently_dead)
    }

    /// Every status change the unit has taken since its last spawn.
    pub fn transitions(&self, id: &str) -> Vec<(UnitStatus, UnitStatus)> {
        self.units.get(id).map(|u| u.transitions.clone()).unwrap_or_default()
    }

    pub fn snapshot(&self) -> Vec<UnitSnapshot> {
        self.units
            .values()
            .map(|u| UnitSnapshot {
                unit_id: u.spec.unit_id.clone(),
                kind: u.spec.kind,
                status: u.status,
                restart_count: u.restart_count,
                pid: u.running.as_ref().and_then(Running::pid),
            })
            .collect()
    }
}

impl Drop for Handlers {
    fn drop(&mut self) {
        self.stop_all(Duration::from_millis(500));
    }
}

fn evaluate(u: &mut Unit, now_ns: u64) -> HealthReport {
    let alive = u.running.as_mut().is_some_and(Running::alive);
    if alive && u.spec.heartbeat == HeartbeatSource::Synthetic {
        u.last_heartbeat_ns = Some(now_ns);
    }
    let since = u.last_heartbeat_ns.unwrap_or(u.spawned_ns);
    let age_ms = now_ns.saturating_sub(since) as f64 / 1e6;
    let mut health = derive_health(age_ms, alive, u.self_status, &u.spec.health);
    if u.last_heartbeat_ns.is_none() && matches!(health, HealthStatus::Healthy | HealthStatus::Unhealthy) {
        health = HealthStatus::Starting;
    }
    if health == HealthStatus::Healthy && u.resource_degraded {
        health = HealthStatus::Degraded;
    }
    if u.status != UnitStatus::Stopped {
        u.apply(LifecycleEvent::Health(health));
    }
    let status = match u.status {
        UnitStatus::Stopped => HealthStatus::Dead,
        UnitStatus::Dead => HealthStatus::Dead,
        _ => health,
    };
    HealthReport {
        pipeline_id: u.spec.unit_id.clone(),
        status,
        heartbeat_age_ms: age_ms,
        proposal_rate_hz: 0.0,
        restart_count: u.restart_count,
    }
}

fn exec_exists(exec: &std::path::Path) -> bool {
    if exec.components().count() > 1 {
        return exec.is_file();
    }
    std::env::var_os("PATH")
        .map(|p| std::env::split_paths(&p).any(|d| d.join(exec).is_file()))
        .unwrap_or(false)
}

fn signal_group(pid: u32, sig: libc::c_int) {
    // SAFETY: plain syscall; a negative pid addresses the process group the
    // child leads.
    unsafe {
        libc::kill(-(pid as libc::pid_t), sig);
    }
}

fn terminate(u: &mut Unit, deadline: Duration) -> StopOutcome {
    let Some(running) = u.running.take() else {
        return StopOutcome::AlreadyStopped;
    };
    let start = Instant::now();
    match running {
        Running::Process(mut child) => {
            let pid = child.id();
            signal_group(pid, libc::SIGTERM);
            let mut outcome = StopOutcome::Forced;
            while start.elapsed() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    outcome = StopOutcome::Graceful;
                    break;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            // Also sweeps up anything the leader left behind in its group.
            signal_group(pid, libc::SIGKILL);
            let _ = child.wait();
            outcome
        }
        Running::Thread { mut handle, stop } => {
            stop.store(true, Ordering::Release);
            let Some(h) = handle.take() else {
                return StopOutcome::Graceful;
            };
            loop {
                if h.is_finished() {
                    let _ = h.join();
                    return StopOutcome::Graceful;
                }
                if start.elapsed() >= deadline {
                    log::warn!("unit {} ignored its stop flag; abandoning thread", u.spec.unit_id);
                    return StopOutcome::Forced;
                }
                std::thread::sleep(Duration::from_millis(2));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::NodeRegistration;

    const MS: u64 = 1_000_000;

    fn sleeper(id: &str, kind: UnitKind) -> UnitSpec {
        let mut s = UnitSpec::new(
            id,
            kind,
            Launch::Process {
                exec: "/bin/sh".into(),
                args: vec!["-c".into(), "sleep 30".into()],
                config: None,
            },
        );
        s.heartbeat = HeartbeatSource::Synthetic;
        s
    }

    fn beating_module(id: &str) -> UnitSpec {
        let f: InProcessFn = Arc::new(|ctx: UnitContext| {
            while !ctx.should_stop() {
                std::thread::sleep(Duration::from_millis(2));
            }
        });
        let mut s = UnitSpec::new(id, UnitKind::Module, Launch::InProcess(f));
        s.heartbeat = HeartbeatSource::Synthetic;
        s
    }

    fn hb(id: &str) -> Heartbeat {
        Heartbeat {
            unit_id: id.into(),
            tick_ns: 0,
            self_status: HealthStatus::Healthy,
        }
    }

    #[test]
    fn missing_executable() {
        let mut h = Handlers::new("local");
        let spec = UnitSpec::new(
            "ghost",
            UnitKind::Driver,
            Launch::Process {
                exec: "/nonexistent/racer".into(),
                args: vec![],
                config: None,
            },
        );
        assert!(matches!(h.spawn(spec, 0), Err(HandlerError::ExecutableMissing(_))));
        assert_eq!(h.status("ghost"), Some(UnitStatus::Stopped));
    }

    #[test]
    fn duplicate_id_rejected() {
        let mut h = Handlers::new("local");
        h.spawn(beating_module("m"), 0).unwrap();
        assert!(matches!(h.spawn(beating_module("m"), 0), Err(HandlerError::Duplicate(_))));
        h.stop("m", Duration::from_secs(1)).unwrap();
        h.spawn(beating_module("m"), 0).unwrap();
    }

    #[test]
    fn remote_placement_unreachable() {
        let mut h = Handlers::new("local");
        let mut spec = beating_module("m");
        spec.node = Some("trackside-2".into());
        assert!(matches!(h.spawn(spec, 0), Err(HandlerError::NodeUnreachable(_))));
        let mut spec = beating_module("m2");
        spec.node = Some("local".into());
        h.spawn(spec, 0).unwrap();
    }

    #[test]
    fn bus_heartbeats_drive_health() {
        let mut h = Handlers::new("local");
        let mut spec = beating_module("p");
        spec.heartbeat = HeartbeatSource::Bus;
        spec.kind = UnitKind::Pipeline;
        h.spawn(spec, 0).unwrap();
        assert_eq!(h.health_tick("p", 50 * MS).unwrap().status, HealthStatus::Starting);
        h.record_heartbeat(&hb("p"), 100 * MS);
        assert_eq!(h.status("p"), Some(UnitStatus::Running));
        assert_eq!(h.health_tick("p", 250 * MS).unwrap().status, HealthStatus::Healthy);
        let r = h.health_tick("p", 450 * MS).unwrap();
        assert_eq!(r.status, HealthStatus::Unhealthy);
        assert!((r.heartbeat_age_ms - 350.0).abs() < 1e-9);
        assert_eq!(h.status("p"), Some(UnitStatus::Unhealthy));
        h.record_heartbeat(&hb("p"), 460 * MS);
        assert_eq!(h.health_tick("p", 470 * MS).unwrap().status, HealthStatus::Healthy);
        assert_eq!(h.status("p"), Some(UnitStatus::Running));
        assert_eq!(h.health_tick("p", 1500 * MS).unwrap().status, HealthStatus::Dead);
        h.stop("p", Duration::from_secs(1)).unwrap();
        for (a, b) in h.transitions("p") {
            assert!(transition_allowed(a, b));
        }
    }

    #[test]
    fn restart_backoff_then_permanent_death() {
        let mut h = Handlers::new("local");
        let f: InProcessFn = Arc::new(|_ctx| {});
        let mut spec = UnitSpec::new("flaky", UnitKind::Module, Launch::InProcess(f));
        spec.heartbeat = HeartbeatSource::Synthetic;
        h.spawn(spec, 0).unwrap();
        let mut now = 0;
        let mut deaths = Vec::new();
        let mut gaps = Vec::new();
        loop {
            std::thread::sleep(Duration::from_millis(2));
            h.health_tick("flaky", now).unwrap();
            match h.restart_if_needed("flaky", now).unwrap() {
                RestartAction::Scheduled { attempt, .. } if deaths.len() < attempt as usize => deaths.push(now),
                RestartAction::Restarted { attempt } => gaps.push(now - deaths[attempt as usize - 1]),
                RestartAction::PermanentlyDead => break,
                _ => {}
            }
            now += 10 * MS;
            assert!(now < 10_000 * MS);
        }
        assert_eq!(gaps, vec![500 * MS, 1000 * MS, 2000 * MS]);
        assert_eq!(h.restart_count("flaky"), Some(3));
        assert!(h.is_permanently_dead("flaky"));
        assert_eq!(h.restart_if_needed("flaky", now).unwrap(), RestartAction::None);
        assert_eq!(h.status("flaky"), Some(UnitStatus::Dead));
    }

    #[test]
    fn permanent_death_is_announced() {
        let bus = Bus::new();
        let node = bus.register_node(NodeRegistration::master("sup")).unwrap();
        let events = bus.subscribe(topics::SUPERVISOR_EVENT).unwrap();
        let health = bus.subscribe("unit/*/health").unwrap();
        let mut h = Handlers::new("local").with_publisher(node);
        let f: InProcessFn = Arc::new(|_ctx| {});
        let mut spec = UnitSpec::new("once", UnitKind::Module, Launch::InProcess(f));
        spec.restart.max_restarts = 0;
        spec.heartbeat = HeartbeatSource::Synthetic;
        h.spawn(spec, 0).unwrap();
        std::thread::sleep(Duration::from_millis(20));
        assert_eq!(h.health_tick("once", MS).unwrap().status, HealthStatus::Dead);
        assert_eq!(h.restart_if_needed("once", MS).unwrap(), RestartAction::PermanentlyDead);
        let f = events.try_recv().expect("notice");
        assert_eq!(
            SupervisorNotice::from_payload(&f.payload).unwrap(),
            SupervisorNotice::UnitPermanentlyDead { unit_id: "once".into() }
        );
        let f = health.try_recv().expect("health report");
        assert_eq!(f.topic, "unit/once/health");
    }

    #[test]
    fn stop_is_idempotent_and_forces_hung_units() {
        let mut h = Handlers::new("local");
        // ignores SIGTERM
        let mut spec = sleeper("hung", UnitKind::Driver);
        spec.launch = Launch::Process {
            exec: "/bin/sh".into(),
            args: vec!["-c".into(), "trap '' TERM; while true; do sleep 0.05; done".into()],
            config: None,
        };
        h.spawn(spec, 0).unwrap();
        std::thread::sleep(Duration::from_millis(100));
        let t = Instant::now();
        assert_eq!(h.stop("hung", Duration::from_millis(200)).unwrap(), StopOutcome::Forced);
        assert!(t.elapsed() >= Duration::from_millis(200));
        assert_eq!(h.status("hung"), Some(UnitStatus::Stopped));
        assert_eq!(h.stop("hung", Duration::from_millis(200)).unwrap(), StopOutcome::AlreadyStopped);

        h.spawn(sleeper("coop", UnitKind::Driver), 0).unwrap();
        let t = Instant::now();
        assert_eq!(h.stop("coop", Duration::from_secs(2)).unwrap(), StopOutcome::Graceful);
        assert!(t.elapsed() < Duration::from_secs(1));
    }

    #[test]
    fn killed_process_is_dead_at_next_tick() {
        let mut h = Handlers::new("local");
        h.spawn(sleeper("d", UnitKind::Driver), 0).unwrap();
        assert_eq!(h.health_tick("d", 10 * MS).unwrap().status, HealthStatus::Healthy);
        assert!(h.kill("d").unwrap());
        assert_eq!(h.health_tick("d", 20 * MS).unwrap().status, HealthStatus::Dead);
        assert_eq!(h.status("d"), Some(UnitStatus::Dead));
    }
}
