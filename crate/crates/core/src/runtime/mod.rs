//! Session runner. Drives the simulator, estimator, pipelines, decision
//! logic, adapter and supervisor in lockstep on simulated time, so a seeded
//! scenario replays identically whether pipelines run as threads or as
//! separate processes.
//!
//! Per decision tick the runner publishes the estimate and the margin (the
//! pipelines' clock), then waits until every live pipeline has answered for
//! that tick before arbitrating.

mod scenario;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::adapter::{ActuatorSetpoints, AdapterError, VehicleAdapter};
use crate::bus::{monotonic_ns, topics, Bus, BusError, Frame, Node, NodeRegistration, SubscribeOptions, Subscription};
use crate::decision::{degradation_tick, Arbiter, ArbitrationInput, Candidate, SelectReason, Selection};
use crate::estimator::{Estimator, EstimatorError};
use crate::handlers::{HandlerError, Handlers, Launch, RestartAction, UnitContext, UnitKind, UnitSpec, UnitStatus};
use crate::model::codec::{peek_tag, Payload};
use crate::model::{
    tags, AsEvent, AsEventMsg, AsState, ControlProposal, HealthStatus, Heartbeat, HmiCommand, HmiCommandKind,
    LapEvent, NormalizedCommand, PipelineScore, PoseMeasurement, ResourceUsage, ScoreReport, SimTruth, StateChange,
    SupervisorNotice, VehicleStateEstimate,
};
use crate::pipelines::runner;
use crate::sim::{SimError, Simulator, TrackError, TrackModel};
use crate::supervisor::{
    breaches, GuardContext, LapRecord, LogError, LogHeader, Logger, MarginSource, MissionSpec, ResourceMonitor,
    Supervisor, STATIONARY_SPEED,
};

pub use scenario::{
    assets_dir, EstimatorMode, EstimatorSection, FaultsSection, LaunchMode, PassCriteria, PeriodicDropouts,
    PipelineEntry, PipelineSet, Scenario, ScenarioError, MAX_SEED, ScheduledEvent, DECISION_PERIOD_NS, SENSOR_PERIOD_NS,
};

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("track: {0}")]
    Track(#[from] TrackError),
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("estimator: {0}")]
    Estimator(#[from] EstimatorError),
    #[error("adapter: {0}")]
    Adapter(#[from] AdapterError),
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("handlers: {0}")]
    Handler(#[from] HandlerError),
    #[error("log: {0}")]
    Log(#[from] LogError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("startup: {0}")]
    Startup(String),
}

pub struct RunOptions {
    /// Bus to run on, e.g. one with a gateway attached. A fresh bus otherwise.
    pub bus: Option<Bus>,
    /// Listen endpoint for out-of-process pipelines.
    pub bus_endpoint: String,
    /// Pipeline executable; enables process launch.
    pub pipeline_exec: Option<PathBuf>,
    /// Session log directory; no log when `None`.
    pub log_dir: Option<PathBuf>,
    pub session: Option<String>,
    /// External stop request (Ctrl-C, tests).
    pub stop: Option<Arc<AtomicBool>>,
    /// Wall-clock budget for all live pipelines to answer one tick.
    pub response_timeout: Duration,
    /// Wall-clock budget for a spawned pipeline's first heartbeat.
    pub startup_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            bus: None,
            bus_endpoint: "127.0.0.1:0".into(),
            pipeline_exec: None,
            log_dir: None,
            session: None,
            stop: None,
            response_timeout: Duration::from_millis(500),
            startup_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Finished,
    Emergency,
    /// Ended in a completed safe stop without resuming.
    SafeStopped,
    Timeout,
    /// Stopped on external request.
    Aborted,
}

impl RunOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            RunOutcome::Finished => "finished",
            RunOutcome::Emergency => "emergency",
            RunOutcome::SafeStopped => "safe_stopped",
            RunOutcome::Timeout => "timeout",
            RunOutcome::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRecord {
    pub t_ns: u64,
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealthChange {
    pub t_ns: u64,
    pub pipeline_id: String,
    pub status: HealthStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario: String,
    pub seed: u64,
    pub session: String,
    pub outcome: RunOutcome,
    pub laps: Vec<LapRecord>,
    pub total_s: Option<f64>,
    pub sim_time_s: f64,
    pub wall_time_s: f64,
    /// Simulation steps spent off track while driving.
    pub off_track_steps: u64,
    /// Largest |lateral offset| while driving, m.
    pub max_lateral_dev: f64,
    pub switches: u32,
    pub selections: Vec<SelectionRecord>,
    /// Ground truth at every decision tick.
    pub truth: Vec<SimTruth>,
    /// Every published estimate.
    pub estimates: Vec<VehicleStateEstimate>,
    pub dropout_windows: Vec<(f64, f64)>,
    pub kills: Vec<(String, u64)>,
    pub health_changes: Vec<HealthChange>,
    pub state_history: Vec<StateChange>,
    pub log_path: Option<PathBuf>,
    pub log_records: u64,
    pub response_timeouts: u64,
    pub criteria: Vec<CriterionResult>,
}

impl RunResult {
    pub fn real_time_factor(&self) -> f64 {
        if self.wall_time_s > 0.0 {
            self.sim_time_s / self.wall_time_s
        } else {
            f64::INFINITY
        }
    }

    pub fn passed(&self) -> bool {
        self.outcome == RunOutcome::Finished && self.criteria.iter().all(|c| c.passed)
    }

    /// Plain-text results table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "scenario {} (seed {})\noutcome  {}\nsim {:.2} s, wall {:.2} s, x{:.1}\n\nlap  role     time_s\n",
            self.scenario,
            self.seed,
            self.outcome.as_str(),
            self.sim_time_s,
            self.wall_time_s,
            self.real_time_factor()
        );
        for l in &self.laps {
            s.push_str(&format!("{:<4} {:<8} {:.3}\n", l.lap, l.role.as_str(), l.time_s));
        }
        if let Some(t) = self.total_s {
            s.push_str(&format!("total         {t:.3}\n"));
        }
        s.push_str(&format!(
            "\nmax lateral deviation {:.3} m\noff-track steps {}\narbitration switches {}\n",
            self.max_lateral_dev, self.off_track_steps, self.switches
        ));
        for c in &self.criteria {
            s.push_str(&format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        s
    }
}

struct Slot {
    id: String,
    priority: f64,
    period_ns: u64,
    proposal: Option<ControlProposal>,
    health: HealthStatus,
}

/// Attaches a named node to the bus as a participant of the session.
fn node(bus: &Bus, id: &str) -> Result<Node, BusError> {
    bus.register_node(NodeRegistration::slave(id))
}

fn publish(node: &Node, topic: &str, payload: Vec<u8>) {
    if let Err(e) = node.publish(topic, payload) {
        log::warn!("{} publish on {topic}: {e}", node.id());
    }
}

fn default_session(s: &Scenario) -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{}-{}-{secs}", s.name, s.seed)
}

/// Raw last-pose forwarding, the negative control for the filter.
struct Passthrough {
    pose: Option<PoseMeasurement>,
    speed: f64,
}

impl Passthrough {
    fn estimate(&self, t_ns: u64, cfg: &crate::estimator::EstimatorConfig) -> Option<VehicleStateEstimate> {
        let p = self.pose?;
        let r = cfg.r_pos.powi(2);
        Some(VehicleStateEstimate {
            x: p.x,
            y: p.y,
            heading: p.heading,
            speed: self.speed,
            yaw_rate: 0.0,
            cov_diag: [r, r, cfg.r_heading.powi(2), cfg.r_speed.powi(2)],
            gps_valid: crate::estimator::gps_valid(t_ns, Some(p.timestamp_ns), cfg.dropout_staleness_ms),
            timestamp_ns: p.timestamp_ns,
        })
    }
}

enum StateEstimator {
    Filter(Estimator),
    Passthrough(Passthrough),
}

struct TempDir(PathBuf);

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn temp_dir() -> Result<TempDir, std::io::Error> {
    use std::sync::atomic::AtomicU64;
    static N: AtomicU64 = AtomicU64::new(0);
    let p = std::env::temp_dir().join(format!(
        "racesup-{}-{}",
        std::process::id(),
        N.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&p)?;
    Ok(TempDir(p))
}

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario, opts: RunOptions) -> Result<RunResult, RuntimeError> {
    scenario.validate()?;
    let track_path = scenario.track_path()?.canonicalize()?;
    let track = Arc::new(TrackModel::from_csv_file(&track_path)?);
    let faults = scenario.fault_schedule()?;
    let dropout_windows = faults.dropout_windows();
    let sim = Simulator::new(scenario.vehicle, track.clone(), faults, scenario.dt, scenario.seed)?;
    let est_cfg = scenario.estimator_config();
    let estimator = match scenario.estimator.mode {
        EstimatorMode::Filter => StateEstimator::Filter(Estimator::new(est_cfg)?),
        EstimatorMode::Passthrough => StateEstimator::Passthrough(Passthrough { pose: None, speed: 0.0 }),
    };
    let arbiter = Arbiter::new(scenario.arbitration_config());
    let adapter = VehicleAdapter::new(scenario.adapter_profile())?;

    let own_bus = opts.bus.is_none();
    let bus = opts.bus.clone().unwrap_or_default();
    let session = opts.session.clone().unwrap_or_else(|| default_session(scenario));

    let process: Vec<String> = scenario
        .enabled_pipelines()
        .filter(|e| match e.launch {
            LaunchMode::Process => true,
            LaunchMode::Thread => false,
            LaunchMode::Auto => opts.pipeline_exec.is_some(),
        })
        .map(|e| e.id.clone())
        .collect();
    if !process.is_empty() && opts.pipeline_exec.is_none() {
        return Err(RuntimeError::Startup("process launch requested without a pipeline executable".into()));
    }
    let endpoint = if process.is_empty() {
        None
    } else {
        let addr = match bus.listen_addr() {
            Some(a) => a,
            None => bus.listen(&opts.bus_endpoint)?,
        };
        Some(addr.to_string())
    };

    let sup_node = bus.register_node(NodeRegistration::master("supervisor"))?;
    let pipe_sub = bus.subscribe_many(
        &["pipeline/*/proposal", "pipeline/*/heartbeat"],
        SubscribeOptions {
            capacity: 8192,
            ..Default::default()
        },
    )?;
    let ctrl_sub = bus.subscribe_many(
        &[topics::HMI_COMMAND, topics::SUPERVISOR_EVENT],
        SubscribeOptions {
            capacity: 4096,
            ..Default::default()
        },
    )?;

    let logger = match &opts.log_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("{session}.rslg"));
            let header = LogHeader::new(env!("CARGO_PKG_VERSION"), &scenario.to_toml(), monotonic_ns());
            Some(Logger::start(&bus, &path, &header)?)
        }
        None => None,
    };

    let mut supervisor = Supervisor::new(Some(sup_node));
    supervisor.load_mission(MissionSpec {
        format: scenario.mission,
        track: scenario.track.clone(),
    });
    supervisor
        .set_margin(scenario.margin, MarginSource::Default)
        .map_err(|e| RuntimeError::Startup(e.to_string()))?;

    let mut handlers = Handlers::new("local").with_publisher(node(&bus, "handlers")?);
    if let Some(ep) = &endpoint {
        handlers = handlers.with_bus_endpoint(ep.clone());
    }

    let mut s = Session {
        scenario,
        opts: &opts,
        bus: bus.clone(),
        sim_node: node(&bus, "sim")?,
        est_node: node(&bus, "estimator")?,
        dec_node: node(&bus, "decision")?,
        act_node: node(&bus, "adapter")?,
        sched_node: node(&bus, "scenario")?,
        pipe_sub,
        ctrl_sub,
        sim,
        estimator,
        est_cfg,
        arbiter,
        adapter,
        supervisor,
        handlers,
        track,
        track_path,
        cfg_dir: temp_dir()?,
        process,
        slots: BTreeMap::new(),
        hmi_override: None,
        degradation: scenario.degradation,
        last_estimate: None,
        last_selection: None,
        setpoints: ActuatorSetpoints::default(),
        lap_mark_ns: 0,
        started_once: false,
        mission_start_sent: false,
        events_fired: vec![false; scenario.events.len()],
        resource: ResourceMonitor::new(),
        last_resource_sample: Instant::now(),
        result: RunResult {
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            session,
            outcome: RunOutcome::Timeout,
            dropout_windows,
            log_path: logger.as_ref().map(|l| l.path().to_path_buf()),
            ..empty_result()
        },
    };

    let wall0 = Instant::now();
    let outcome = s.main_loop(wall0);
    s.handlers.stop_all(Duration::from_secs(1));
    let mut result = s.finish(wall0);
    if let Some(l) = logger {
        result.log_records = l.stop()?;
    }
    if own_bus {
        bus.shutdown();
    }
    result.outcome = outcome?;
    result.criteria = evaluate_criteria(&scenario.criteria, &result);
    Ok(result)
}

fn evaluate_criteria(c: &PassCriteria, r: &RunResult) -> Vec<CriterionResult> {
    let mut out = vec![CriterionResult {
        name: "mission".into(),
        passed: r.outcome == RunOutcome::Finished,
        detail: format!("outcome {}", r.outcome.as_str()),
    }];
    if let Some(max) = c.max_lap_time_s {
        let worst = r.laps.iter().map(|l| l.time_s).fold(0.0, f64::max);
        out.push(CriterionResult {
            name: "max_lap_time".into(),
            passed: !r.laps.is_empty() && worst <= max,
            detail: format!("slowest lap {worst:.3} s, limit {max} s"),
        });
    }
    if let Some(max) = c.max_lateral_deviation_m {
        out.push(CriterionResult {
            name: "max_lateral_deviation".into(),
            passed: r.max_lateral_dev <= max,
            detail: format!("{:.3} m, limit {max} m", r.max_lateral_dev),
        });
    }
    if let Some(max) = c.max_off_track_steps {
        out.push(CriterionResult {
            name: "off_track".into(),
            passed: r.off_track_steps <= max,
            detail: format!("{} steps, limit {max}", r.off_track_steps),
        });
    }
    if c.require_failover {
        let n = r
            .selections
            .iter()
            .filter(|s| s.selection.reason == SelectReason::SafetyOverride)
            .count();
        out.push(CriterionResult {
            name: "failover".into(),
            passed: n > 0,
            detail: format!("{n} safety-override selections"),
        });
    }
    out
}


struct Session<'a> {
    scenario: &'a Scenario,
    opts: &'a RunOptions,
    bus: Bus,
    sim_node: Node,
    est_node: Node,
    dec_node: Node,
    act_node: Node,
    sched_node: Node,
    pipe_sub: Subscription,
    ctrl_sub: Subscription,
    sim: Simulator,
    estimator: StateEstimator,
    est_cfg: crate::estimator::EstimatorConfig,
    arbiter: Arbiter,
    adapter: VehicleAdapter,
    supervisor: Supervisor,
    handlers: Handlers,
    track: Arc<TrackModel>,
    track_path: PathBuf,
    cfg_dir: TempDir,
    /// Pipelines launched as processes.
    process: Vec<String>,
    slots: BTreeMap<String, Slot>,
    hmi_override: Option<String>,
    degradation: crate::decision::DegradationState,
    last_estimate: Option<VehicleStateEstimate>,
    last_selection: Option<Selection>,
    setpoints: ActuatorSetpoints,
    lap_mark_ns: u64,
    started_once: bool,
    mission_start_sent: bool,
    events_fired: Vec<bool>,
    resource: ResourceMonitor,
    last_resource_sample: Instant,
    result: RunResult,
}

impl Session<'_> {
    fn finish(mut self, wall0: Instant) -> RunResult {
        let mut r = std::mem::replace(&mut self.result, empty_result());
        r.wall_time_s = wall0.elapsed().as_secs_f64();
        r.sim_time_s = self.sim.t_ns() as f64 / 1e9;
        r.state_history = self.supervisor.history().to_vec();
        if let Some(m) = self.supervisor.mission() {
            r.laps = m.laps().to_vec();
            r.total_s = m.total_s();
        }
        r
    }

    fn stop_requested(&self) -> bool {
        self.opts.stop.as_ref().is_some_and(|s| s.load(Ordering::Acquire))
    }

    fn speed(&self) -> f64 {
        self.last_estimate.map_or(0.0, |e| e.speed)
    }

    fn estimator_ready(&self) -> bool {
        match &self.estimator {
            StateEstimator::Filter(e) => e.is_initialized(),
            StateEstimator::Passthrough(p) => p.pose.is_some(),
        }
    }

    fn guard_ctx(&mut self) -> GuardContext {
        let mut running = 0;
        let mut all = true;
        for id in self.slots.keys() {
            if self.handlers.is_permanently_dead(id) {
                continue;
            }
            if self.handlers.status(id) == Some(UnitStatus::Running) {
                running += 1;
            } else {
                all = false;
            }
        }
        GuardContext {
            required_units_running: all && running > 0,
            estimator_ready: self.estimator_ready(),
            mission_loaded: true,
            speed: self.speed(),
        }
    }

    fn event(&mut self, ev: AsEvent, t: u64) {
        let ctx = self.guard_ctx();
        let before = self.supervisor.state();
        self.supervisor.handle_event(ev, ctx, t);
        let after = self.supervisor.state();
        if before != AsState::Driving && after == AsState::Driving {
            self.lap_mark_ns = t;
            self.started_once = true;
        }
        if after != AsState::Ready {
            self.mission_start_sent = false;
        }
    }

    fn main_loop(&mut self, wall0: Instant) -> Result<RunOutcome, RuntimeError> {
        let max_ns = (self.scenario.max_sim_s * 1e9).round() as u64;
        let est_period = {
            let p = (1e9 / self.est_cfg.publish_rate_hz).round() as u64;
            if p % SENSOR_PERIOD_NS == 0 {
                p
            } else {
                SENSOR_PERIOD_NS
            }
        };
        self.event(AsEvent::PowerOn, 0);
        self.spawn_pipelines()?;
        loop {
            let t = self.sim.t_ns();
            if self.stop_requested() {
                return Ok(RunOutcome::Aborted);
            }
            if t > max_ns {
                return Ok(RunOutcome::Timeout);
            }
            if t % SENSOR_PERIOD_NS == 0 {
                self.sensor_tick(t, t % est_period == 0)?;
            }
            if t % DECISION_PERIOD_NS == 0 {
                if let Some(o) = self.decision_tick(t) {
                    return Ok(o);
                }
            }
            let out = self.adapter.tick(t);
            self.setpoints = out.setpoints;
            if out.raise_fault {
                self.event(AsEvent::FaultDetected, t);
            }
            let step = self.sim.step(&self.setpoints)?;
            let t1 = self.sim.t_ns();
            if self.supervisor.state() == AsState::Driving {
                if step.progress.off_track {
                    self.result.off_track_steps += 1;
                }
                self.result.max_lateral_dev = self.result.max_lateral_dev.max(step.progress.lateral_offset.abs());
            }
            if step.lap_completed {
                self.on_lap(t1);
            }
            if self.scenario.pace > 0.0 {
                let target = Duration::from_secs_f64(t1 as f64 / 1e9 / self.scenario.pace);
                let el = wall0.elapsed();
                if target > el {
                    std::thread::sleep(target - el);
                }
            }
        }
    }

    fn sensor_tick(&mut self, t: u64, publish_estimate: bool) -> Result<(), RuntimeError> {
        let m = self.sim.sense();
        if let Some(p) = &m.pose {
            publish(&self.sim_node, topics::SENSOR_POSE, p.to_payload());
        }
        publish(&self.sim_node, topics::SENSOR_WHEELSPEED, m.wheel.to_payload());
        let est = match &mut self.estimator {
            StateEstimator::Filter(e) => {
                e.ingest_steer_command(self.setpoints.steer_angle_cmd);
                e.advance_to(t)?;
                if let Some(p) = &m.pose {
                    if let Err(err) = e.ingest_pose(p) {
                        log::warn!("pose rejected: {err}");
                    }
                }
                if let Err(err) = e.ingest_wheelspeed(&m.wheel) {
                    log::warn!("wheel speed rejected: {err}");
                }
                e.state().ok()
            }
            StateEstimator::Passthrough(p) => {
                if m.pose.is_some() {
                    p.pose = m.pose;
                }
                p.speed = m.wheel.speed;
                p.estimate(t, &self.est_cfg)
            }
        };
        if let Some(e) = est {
            self.last_estimate = Some(e);
            if publish_estimate {
                publish(&self.est_node, topics::ESTIMATOR_STATE, e.to_payload());
                self.result.estimates.push(e);
            }
        }
        Ok(())
    }

    fn decision_tick(&mut self, t: u64) -> Option<RunOutcome> {
        self.fire_scheduled(t);
        self.apply_controls(t);
        match self.supervisor.state() {
            AsState::Initializing => {
                let ctx = self.guard_ctx();
                if ctx.required_units_running && ctx.estimator_ready {
                    self.event(AsEvent::InitDone, t);
                }
            }
            AsState::Ready => {
                let may_start = !self.started_once || self.scenario.resume_after_safe_stop;
                if self.started_once && !self.scenario.resume_after_safe_stop {
                    return Some(RunOutcome::SafeStopped);
                }
                if may_start && !self.scenario.wait_for_mission_start && !self.mission_start_sent {
                    let cmd = HmiCommand {
                        kind: HmiCommandKind::MissionStart,
                        client_id: "runtime".into(),
                        timestamp_ns: t,
                    };
                    publish(&self.sched_node, topics::HMI_COMMAND, cmd.to_payload());
                    self.mission_start_sent = true;
                }
            }
            AsState::SafeStop if self.speed() < STATIONARY_SPEED => self.event(AsEvent::StopComplete, t),
            AsState::Finished => return Some(RunOutcome::Finished),
            AsState::Emergency => return Some(RunOutcome::Emergency),
            _ => {}
        }

        self.supervisor.publish_margin(self.degradation.factor, t);
        self.wait_for_pipelines(t);
        self.health_and_restarts(t);
        self.sample_resources();

        let (selection, raise_fault) = self.decide(t);
        if self.supervisor.state() != AsState::Driving {
            self.arbiter.observe_external(selection.command);
        }
        if let Some(prev) = &self.last_selection {
            let between_pipelines = prev.active.pipeline_id().is_some() && selection.active.pipeline_id().is_some();
            if prev.active != selection.active {
                if between_pipelines {
                    self.result.switches += 1;
                }
                log::info!(
                    "t={:.2}s selection {:?} -> {:?} ({})",
                    t as f64 / 1e9,
                    prev.active.pipeline_id(),
                    selection.active.pipeline_id(),
                    selection.reason.as_str()
                );
            }
        }
        publish(&self.dec_node, topics::DECISION_SELECTED, selection.to_payload());
        let setpoints = self.adapter.on_selection(selection.command, t);
        publish(&self.act_node, topics::ADAPTER_ACTUATION, setpoints.to_payload());
        let truth = self.sim.truth();
        publish(&self.sim_node, topics::TELEMETRY_SIM, truth.to_payload());
        self.result.truth.push(truth);
        self.result.selections.push(SelectionRecord {
            t_ns: t,
            selection: selection.clone(),
        });
        self.last_selection = Some(selection);
        if raise_fault {
            self.event(AsEvent::FaultDetected, t);
        }
        None
    }

    fn on_lap(&mut self, t: u64) {
        let lap_time = t.saturating_sub(self.lap_mark_ns) as f64 / 1e9;
        self.lap_mark_ns = t;
        let ev = LapEvent {
            lap: self.sim.laps(),
            lap_time_s: lap_time,
            timestamp_ns: t,
        };
        publish(&self.sim_node, topics::TELEMETRY_LAP, ev.to_payload());
        if self.supervisor.state() == AsState::Driving {
            log::info!("lap {} in {:.3} s", ev.lap, lap_time);
            self.degradation = degradation_tick(true, self.degradation);
            let ctx = self.guard_ctx();
            self.supervisor.on_lap(lap_time, ctx, t);
        }
    }

    fn spawn_pipelines(&mut self) -> Result<(), RuntimeError> {
        for e in self.scenario.enabled_pipelines() {
            let cfg = self.scenario.pipeline_config(e, &self.track_path);
            let launch = if self.process.contains(&e.id) {
                let path = self.cfg_dir.0.join(format!("{}.toml", e.id));
                std::fs::write(&path, cfg.to_toml())?;
                Launch::Process {
                    exec: self.opts.pipeline_exec.clone().expect("checked before spawning"),
                    args: Vec::new(),
                    config: Some(path),
                }
            } else {
                let bus = self.bus.clone();
                let track = self.track.clone();
                let cfg = cfg.clone();
                Launch::InProcess(Arc::new(move |ctx: UnitContext| {
                    let node = match bus.register_node(NodeRegistration::slave(ctx.unit_id.clone())) {
                        Ok(n) => n,
                        Err(e) => {
                            log::error!("pipeline {}: {e}", ctx.unit_id);
                            return;
                        }
                    };
                    if let Err(e) = runner::run(&node, cfg.clone(), track.clone(), &ctx.stop) {
                        log::error!("pipeline {}: {e}", ctx.unit_id);
                    }
                }))
            };
            let mut spec = UnitSpec::new(e.id.clone(), UnitKind::Pipeline, launch);
            spec.restart = e.restart;
            spec.health = self.scenario.health;
            self.handlers.spawn(spec, 0)?;
            self.slots.insert(
                e.id.clone(),
                Slot {
                    id: e.id.clone(),
                    priority: e.priority,
                    period_ns: cfg.period_ns(),
                    proposal: None,
                    health: HealthStatus::Starting,
                },
            );
        }
        // Block until each pipeline has announced itself.
        let deadline = Instant::now() + self.opts.startup_timeout;
        loop {
            let pending: Vec<String> = self
                .slots
                .keys()
                .filter(|id| self.handlers.status(id) == Some(UnitStatus::Starting))
                .cloned()
                .collect();
            if pending.is_empty() {
                return Ok(());
            }
            for id in &pending {
                if !self.handlers.is_alive(id) {
                    return Err(RuntimeError::Startup(format!("pipeline {id} exited during startup")));
                }
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(RuntimeError::Startup(format!("no heartbeat from {}", pending.join(", "))));
            }
            if let Some(f) = self.pipe_sub.recv_timeout((deadline - now).min(Duration::from_millis(50)))? {
                self.absorb(&f, 0);
            }
        }
    }

    /// Takes in a pipeline frame; returns the sender id if the frame answers
    /// tick `t`.
    fn absorb(&mut self, f: &Frame, t: u64) -> Option<String> {
        let mut parts = f.topic.split('/');
        let (Some("pipeline"), Some(id), Some(kind)) = (parts.next(), parts.next(), parts.next()) else {
            return None;
        };
        match kind {
            "proposal" => {
                let p = match ControlProposal::from_payload(&f.payload) {
                    Ok(p) => p,
                    Err(e) => {
                        log::warn!("bad proposal from {id}: {e}");
                        return None;
                    }
                };
                if p.pipeline_id != id {
                    log::warn!("proposal on {} claims id {}", f.topic, p.pipeline_id);
                    return None;
                }
                let answers = p.command.timestamp_ns == t;
                let slot = self.slots.get_mut(id)?;
                slot.proposal = Some(p);
                answers.then(|| id.to_string())
            }
            "heartbeat" => {
                let hb = match Heartbeat::from_payload(&f.payload) {
                    Ok(h) => h,
                    Err(e) => {
                        log::warn!("bad heartbeat from {id}: {e}");
                        return None;
                    }
                };
                if hb.unit_id != id {
                    return None;
                }
                self.handlers.record_heartbeat(&hb, t);
                (hb.self_status == HealthStatus::Degraded && hb.tick_ns == t).then(|| id.to_string())
            }
            _ => None,
        }
    }

    fn fire_scheduled(&mut self, t: u64) {
        for (i, ev) in self.scenario.events.iter().enumerate() {
            if self.events_fired[i] || ((ev.at_s * 1e9).round() as u64) > t {
                continue;
            }
            self.events_fired[i] = true;
            if let Some(id) = &ev.kill {
                match self.handlers.kill(id) {
                    Ok(true) => {
                        log::info!("killed pipeline {id} at {:.3} s", t as f64 / 1e9);
                        self.result.kills.push((id.clone(), t));
                    }
                    Ok(false) => log::warn!("kill of {id}: not running"),
                    Err(e) => log::warn!("kill of {id}: {e}"),
                }
            }
            if let Some(m) = &ev.hmi {
                let Ok(kind) = m.clone().into_kind() else { continue };
                let cmd = HmiCommand {
                    kind,
                    client_id: "scenario".into(),
                    timestamp_ns: t,
                };
                publish(&self.sched_node, topics::HMI_COMMAND, cmd.to_payload());
            }
        }
    }

    fn apply_controls(&mut self, t: u64) {
        for f in self.ctrl_sub.drain() {
            match peek_tag(&f.payload) {
                Some(tags::HMI_COMMAND) => match HmiCommand::from_payload(&f.payload) {
                    Ok(c) => self.apply_hmi(c, t),
                    Err(e) => log::warn!("bad hmi command: {e}"),
                },
                Some(tags::AS_EVENT) => match AsEventMsg::from_payload(&f.payload) {
                    Ok(m) => self.event(m.event, t),
                    Err(e) => log::warn!("bad event: {e}"),
                },
                _ => {}
            }
        }
    }

    fn apply_hmi(&mut self, c: HmiCommand, t: u64) {
        log::info!("hmi {} from {:?}", c.kind.type_name(), c.client_id);
        match c.kind {
            HmiCommandKind::SetSafetyMargin { value } => {
                if let Err(e) = self.supervisor.set_margin(value, MarginSource::Hmi) {
                    log::warn!("{e}");
                }
            }
            HmiCommandKind::SetPriority { pipeline_id, priority } => match self.slots.get_mut(&pipeline_id) {
                Some(s) if priority.is_finite() && priority >= 0.0 => s.priority = priority,
                _ => log::warn!("set_priority for {pipeline_id:?} ignored"),
            },
            HmiCommandKind::SelectPipeline { pipeline_id } => self.hmi_override = pipeline_id,
            HmiCommandKind::TeleopAxes { .. } => {}
            HmiCommandKind::Estop => self.event(AsEvent::EStop, t),
            HmiCommandKind::MissionStart => self.event(AsEvent::MissionStart, t),
            HmiCommandKind::Reset => self.event(AsEvent::Reset, t),
        }
    }

    fn wait_for_pipelines(&mut self, t: u64) {
        let mut expected: Vec<String> = Vec::new();
        let ids: Vec<(String, u64)> = self.slots.values().map(|s| (s.id.clone(), s.period_ns)).collect();
        for (id, period) in ids {
            let live = matches!(self.handlers.status(&id), Some(UnitStatus::Running | UnitStatus::Unhealthy));
            if live && t % period == 0 && self.handlers.is_alive(&id) {
                expected.push(id);
            }
        }
        let deadline = Instant::now() + self.opts.response_timeout;
        while !expected.is_empty() {
            let now = Instant::now();
            if now >= deadline {
                self.result.response_timeouts += 1;
                log::debug!("t={t}: no answer from {}", expected.join(", "));
                break;
            }
            match self.pipe_sub.recv_timeout((deadline - now).min(Duration::from_millis(20))) {
                Ok(Some(f)) => {
                    if let Some(id) = self.absorb(&f, t) {
                        expected.retain(|e| *e != id);
                    }
                }
                Ok(None) => {
                    // A unit that died mid-wait will never answer.
                    let dead: Vec<String> =
                        expected.iter().filter(|id| !self.handlers.is_alive(id)).cloned().collect();
                    expected.retain(|id| !dead.contains(id));
                }
                Err(_) => break,
            }
        }
        while let Some(f) = self.pipe_sub.try_recv() {
            self.absorb(&f, t);
        }
    }

    fn health_and_restarts(&mut self, t: u64) {
        for r in self.handlers.health_tick_all(t) {
            if let Some(s) = self.slots.get_mut(&r.pipeline_id) {
                if s.health != r.status {
                    log::info!("t={:.2}s {} {}", t as f64 / 1e9, r.pipeline_id, r.status.as_str());
                    self.result.health_changes.push(HealthChange {
                        t_ns: t,
                        pipeline_id: r.pipeline_id.clone(),
                        status: r.status,
                    });
                    s.health = r.status;
                }
            }
        }
        let ids: Vec<String> = self.slots.keys().cloned().collect();
        for id in ids {
            if self.handlers.status(&id) != Some(UnitStatus::Dead) {
                continue;
            }
            match self.handlers.restart_if_needed(&id, t) {
                Ok(RestartAction::Restarted { attempt }) => {
                    log::info!("restarted {id} (attempt {attempt})");
                    if let Some(s) = self.slots.get_mut(&id) {
                        s.proposal = None;
                    }
                }
                Ok(RestartAction::PermanentlyDead) => log::warn!("{id} permanently dead"),
                Ok(_) => {}
                Err(e) => log::warn!("restart {id}: {e}"),
            }
        }
    }

    fn sample_resources(&mut self) {
        if self.last_resource_sample.elapsed() < Duration::from_secs(1) {
            return;
        }
        self.last_resource_sample = Instant::now();
        let units: Vec<(String, Option<u32>)> =
            self.slots.keys().map(|id| (id.clone(), self.handlers.pid(id))).collect();
        let now = monotonic_ns();
        for s in self.resource.sample(&units, now) {
            let usage = ResourceUsage {
                unit_id: s.unit_id.clone(),
                cpu_fraction: s.cpu_fraction.unwrap_or(-1.0),
                rss_bytes: s.rss_bytes,
                timestamp_ns: now,
            };
            publish(&self.sim_node, topics::TELEMETRY_RESOURCE, usage.to_payload());
            let b = breaches(&s, &self.scenario.resources);
            let _ = self.handlers.set_resource_degraded(&s.unit_id, !b.is_empty());
            if !b.is_empty() {
                self.supervisor.notice(SupervisorNotice::ResourceAlarm {
                    unit_id: s.unit_id,
                    detail: b.join("; "),
                });
            }
        }
    }

    fn decide(&mut self, t: u64) -> (Selection, bool) {
        match self.supervisor.state() {
            AsState::Driving => {
                let candidates: Vec<Candidate<'_>> = self
                    .slots
                    .values()
                    .filter_map(|s| {
                        s.proposal.as_ref().map(|p| Candidate {
                            proposal: p,
                            priority: s.priority,
                            health: s.health,
                        })
                    })
                    .collect();
                let input = ArbitrationInput {
                    now_ns: t,
                    candidates: &candidates,
                    speed: self.last_estimate.map_or(0.0, |e| e.speed),
                    budget: self.supervisor.margin().effective * self.degradation.factor,
                    hmi_override: self.hmi_override.as_deref(),
                };
                let out = self.arbiter.arbitrate(&input);
                let report = ScoreReport {
                    timestamp_ns: t,
                    entries: out
                        .verdicts
                        .iter()
                        .map(|v| PipelineScore {
                            pipeline_id: v.pipeline_id.clone(),
                            score: v.score,
                            admissible: v.verdict.is_ok(),
                            reason: v.verdict.err().map(|r| r.as_str().to_string()),
                        })
                        .collect(),
                };
                publish(&self.dec_node, topics::TELEMETRY_SCORES, report.to_payload());
                (out.selection, out.raise_fault)
            }
            AsState::SafeStop => {
                let steer = self.last_selection.as_ref().map_or(0.0, |s| s.command.steering);
                let pedal = self.scenario.arbitration.safe_stop_pedal;
                (Selection::fallback(NormalizedCommand::new(steer, pedal, t)), false)
            }
            _ => (Selection::fallback(NormalizedCommand::new(0.0, -1.0, t)), false),
        }
    }
}

fn empty_result() -> RunResult {
    RunResult {
        scenario: String::new(),
        seed: 0,
        session: String::new(),
        outcome: RunOutcome::Aborted,
        laps: Vec::new(),
        total_s: None,
        sim_time_s: 0.0,
        wall_time_s: 0.0,
        off_track_steps: 0,
        max_lateral_dev: 0.0,
        switches: 0,
        selections: Vec::new(),
        truth: Vec::new(),
        estimates: Vec::new(),
        dropout_windows: Vec::new(),
        kills: Vec::new(),
        health_changes: Vec::new(),
        state_history: Vec::new(),
        log_path: None,
        log_records: 0,
        response_timeouts: 0,
        criteria: Vec::new(),
    }
}
