//! Typed payloads that flow on the bus.
//!
//! Type-tag registry (first payload octet):
//!
//! | tag  | type                     | tag  | type               |
//! |------|--------------------------|------|--------------------|
//! | 0x01 | [`NormalizedCommand`]    | 0x10 | [`PoseMeasurement`]|
//! | 0x02 | [`ControlProposal`]      | 0x11 | [`WheelSpeed`]     |
//! | 0x03 | [`VehicleStateEstimate`] | 0x12 | `Selection`        |
//! | 0x04 | [`HealthReport`]         | 0x13 | `ActuatorSetpoints`|
//! | 0x05 | [`StateChange`]          | 0x14 | [`Heartbeat`]      |
//! | 0x06 | [`AsEventMsg`]           | 0x15 | [`MarginUpdate`]   |
//! | 0x07 | [`HmiCommand`]           | 0x16 | [`LapEvent`]       |
//! |      |                          | 0x17 | [`SupervisorNotice`]|
//! |      |                          | 0x18 | [`MissionStatus`]  |
//! |      |                          | 0x19 | [`SimTruth`]       |
//! |      |                          | 0x1A | [`ScoreReport`]    |
//! |      |                          | 0x1B | [`ResourceUsage`]  |

pub mod codec;

use std::f64::consts::PI;
use std::fmt;

pub use codec::{CodecError, Payload, Reader, Writer};

pub mod tags {
    pub const NORMALIZED_COMMAND: u8 = 0x01;
    pub const CONTROL_PROPOSAL: u8 = 0x02;
    pub const STATE_ESTIMATE: u8 = 0x03;
    pub const HEALTH_REPORT: u8 = 0x04;
    pub const STATE_CHANGE: u8 = 0x05;
    pub const AS_EVENT: u8 = 0x06;
    pub const HMI_COMMAND: u8 = 0x07;
    pub const POSE: u8 = 0x10;
    pub const WHEEL_SPEED: u8 = 0x11;
    pub const SELECTION: u8 = 0x12;
    pub const ACTUATION: u8 = 0x13;
    pub const HEARTBEAT: u8 = 0x14;
    pub const MARGIN: u8 = 0x15;
    pub const LAP_EVENT: u8 = 0x16;
    pub const NOTICE: u8 = 0x17;
    pub const MISSION_STATUS: u8 = 0x18;
    pub const SIM_TRUTH: u8 = 0x19;
    pub const SCORE_REPORT: u8 = 0x1A;
    pub const RESOURCE_USAGE: u8 = 0x1B;
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Steering,
    Pedal,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Steering => "steering",
            Channel::Pedal => "pedal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CommandError {
    #[error("malformed {0} channel (not finite)")]
    Malformed(Channel),
    #[error("{channel} value {value} outside [-1, 1]")]
    RangeViolation { channel: Channel, value: f64 },
}

/// Vehicle-independent command. Steering −1 is full left lock; pedal < 0
/// brakes, pedal > 0 accelerates. A single pedal channel means braking and
/// throttling can never be requested together.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormalizedCommand {
    pub steering: f64,
    pub pedal: f64,
    pub timestamp_ns: u64,
}

impl NormalizedCommand {
    pub fn new(steering: f64, pedal: f64, timestamp_ns: u64) -> Self {
        NormalizedCommand {
            steering,
            pedal,
            timestamp_ns,
        }
    }
}

/// Accepts iff both channels are finite and within [−1, 1]. Never clamps.
pub fn validate_command(cmd: NormalizedCommand) -> Result<NormalizedCommand, CommandError> {
    for (channel, value) in [(Channel::Steering, cmd.steering), (Channel::Pedal, cmd.pedal)] {
        if !value.is_finite() {
            return Err(CommandError::Malformed(channel));
        }
        if !(-1.0..=1.0).contains(&value) {
            return Err(CommandError::RangeViolation { channel, value });
        }
    }
    Ok(cmd)
}

/// Per-channel Gaussian centred on the proposed command, plus the
/// pipeline's self-assessed weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceModel {
    pub steer_mean: f64,
    pub steer_std: f64,
    pub pedal_mean: f64,
    pub pedal_std: f64,
    pub weight: f64,
}

impl ConfidenceModel {
    pub fn around(cmd: &NormalizedCommand, steer_std: f64, pedal_std: f64, weight: f64) -> Self {
        ConfidenceModel {
            steer_mean: cmd.steering,
            steer_std,
            pedal_mean: cmd.pedal,
            pedal_std,
            weight,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.steer_std >= 0.0
            && self.pedal_std >= 0.0
            && self.steer_std.is_finite()
            && self.pedal_std.is_finite()
            && (-1.0..=1.0).contains(&self.steer_mean)
            && (-1.0..=1.0).contains(&self.pedal_mean)
            && (0.0..=1.0).contains(&self.weight)
    }
}

/// `weight · exp(−(steer_std + pedal_std))`.
pub fn confidence_scalar(c: &ConfidenceModel) -> f64 {
    c.weight * (-(c.steer_std + c.pedal_std)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlProposal {
    pub pipeline_id: String,
    pub command: NormalizedCommand,
    pub confidence: ConfidenceModel,
    pub seq: u64,
    pub compute_latency_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleStateEstimate {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub yaw_rate: f64,
    /// Variances of (x, y, heading, speed).
    pub cov_diag: [f64; 4],
    pub gps_valid: bool,
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HealthStatus {
    Starting,
    Healthy,
    Degraded,
    Unhealthy,
    Dead,
}

impl HealthStatus {
    fn code(self) -> u8 {
        match self {
            HealthStatus::Starting => 0,
            HealthStatus::Healthy => 1,
            HealthStatus::Degraded => 2,
            HealthStatus::Unhealthy => 3,
            HealthStatus::Dead => 4,
        }
    }

    fn from_code(c: u8) -> Result<Self, CodecError> {
        Ok(match c {
            0 => HealthStatus::Starting,
            1 => HealthStatus::Healthy,
            2 => HealthStatus::Degraded,
            3 => HealthStatus::Unhealthy,
            4 => HealthStatus::Dead,
            _ => return Err(CodecError::Invalid(format!("health status {c}"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HealthStatus::Starting => "Starting",
            HealthStatus::Healthy => "Healthy",
            HealthStatus::Degraded => "Degraded",
            HealthStatus::Unhealthy => "Unhealthy",
            HealthStatus::Dead => "Dead",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealthReport {
    pub pipeline_id: String,
    pub status: HealthStatus,
    pub heartbeat_age_ms: f64,
    pub proposal_rate_hz: f64,
    pub restart_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AsState {
    Off,
    Initializing,
    Ready,
    Driving,
    SafeStop,
    Emergency,
    Finished,
}

impl AsState {
    pub const ALL: [AsState; 7] = [
        AsState::Off,
        AsState::Initializing,
        AsState::Ready,
        AsState::Driving,
        AsState::SafeStop,
        AsState::Emergency,
        AsState::Finished,
    ];

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self, CodecError> {
        AsState::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| CodecError::Invalid(format!("AS state {c}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AsState::Off => "Off",
            AsState::Initializing => "Initializing",
            AsState::Ready => "Ready",
            AsState::Driving => "Driving",
            AsState::SafeStop => "SafeStop",
            AsState::Emergency => "Emergency",
            AsState::Finished => "Finished",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AsEvent {
    PowerOn,
    InitDone,
    MissionStart,
    MissionComplete,
    FaultDetected,
    StopComplete,
    EStop,
    Reset,
}

impl AsEvent {
    pub const ALL: [AsEvent; 8] = [
        AsEvent::PowerOn,
        AsEvent::InitDone,
        AsEvent::MissionStart,
        AsEvent::MissionComplete,
        AsEvent::FaultDetected,
        AsEvent::StopComplete,
        AsEvent::EStop,
        AsEvent::Reset,
    ];

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self, CodecError> {
        AsEvent::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| CodecError::Invalid(format!("AS event {c}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AsEvent::PowerOn => "PowerOn",
            AsEvent::InitDone => "InitDone",
            AsEvent::MissionStart => "MissionStart",
            AsEvent::MissionComplete => "MissionComplete",
            AsEvent::FaultDetected => "FaultDetected",
            AsEvent::StopComplete => "StopComplete",
            AsEvent::EStop => "EStop",
            AsEvent::Reset => "Reset",
        }
    }
}

/// A taken transition, published on `supervisor/state`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateChange {
    pub from: AsState,
    pub to: AsState,
    pub event: AsEvent,
    pub timestamp_ns: u64,
}

/// An event request, published on `supervisor/event`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsEventMsg {
    pub event: AsEvent,
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HmiCommandKind {
    SetSafetyMargin { value: f64 },
    SetPriority { pipeline_id: String, priority: f64 },
    /// `None` returns selection to automatic arbitration.
    SelectPipeline { pipeline_id: Option<String> },
    TeleopAxes { steering: f64, pedal: f64 },
    Estop,
    MissionStart,
    Reset,
}

impl HmiCommandKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            HmiCommandKind::SetSafetyMargin { .. } => "set_safety_margin",
            HmiCommandKind::SetPriority { .. } => "set_priority",
            HmiCommandKind::SelectPipeline { .. } => "select_pipeline",
            HmiCommandKind::TeleopAxes { .. } => "teleop_axes",
            HmiCommandKind::Estop => "estop",
            HmiCommandKind::MissionStart => "mission_start",
            HmiCommandKind::Reset => "reset",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmiCommand {
    pub kind: HmiCommandKind,
    pub client_id: String,
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMeasurement {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WheelSpeed {
    pub speed: f64,
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heartbeat {
    pub unit_id: String,
    /// The sender's notion of "now" (its latest tick time).
    pub tick_ns: u64,
    /// Self-assessment: Healthy, or Degraded when the pipeline withheld output.
    pub self_status: HealthStatus,
}

/// Effective risk budget sent to pipelines: the margin and the degradation
/// factor both scale the lateral-acceleration limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginUpdate {
    pub margin: f64,
    pub degradation: f64,
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LapEvent {
    pub lap: u32,
    pub lap_time_s: f64,
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SupervisorNotice {
    TransitionRejected { state: AsState, event: AsEvent },
    ResourceAlarm { unit_id: String, detail: String },
    UnitPermanentlyDead { unit_id: String },
    Info(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissionStatus {
    pub laps_done: u32,
    pub laps_total: u32,
    pub lap_times: Vec<f64>,
    pub total_s: Option<f64>,
}

/// Ground truth from the simulator, for telemetry and offline audits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimTruth {
    pub t_ns: u64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub steer_angle: f64,
    pub s: f64,
    pub lateral_offset: f64,
    pub off_track: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineScore {
    pub pipeline_id: String,
    pub score: f64,
    pub admissible: bool,
    /// Gate failure, when not admissible.
    pub reason: Option<String>,
}

/// Per-tick arbitration scores, for telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub timestamp_ns: u64,
    pub entries: Vec<PipelineScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceUsage {
    pub unit_id: String,
    /// Negative when no interval is available yet.
    pub cpu_fraction: f64,
    pub rss_bytes: u64,
    pub timestamp_ns: u64,
}

pub(crate) fn write_command(w: &mut Writer, c: &NormalizedCommand) {
    w.f64(c.steering);
    w.f64(c.pedal);
    w.u64(c.timestamp_ns);
}

pub(crate) fn read_command(r: &mut Reader<'_>) -> Result<NormalizedCommand, CodecError> {
    Ok(NormalizedCommand {
        steering: r.f64()?,
        pedal: r.f64()?,
        timestamp_ns: r.u64()?,
    })
}

impl Payload for NormalizedCommand {
    const TAG: u8 = tags::NORMALIZED_COMMAND;
    fn write_body(&self, w: &mut Writer) {
        write_command(w, self);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        read_command(r)
    }
}

impl Payload for ControlProposal {
    const TAG: u8 = tags::CONTROL_PROPOSAL;
    fn write_body(&self, w: &mut Writer) {
        w.str(&self.pipeline_id);
        write_command(w, &self.command);
        let c = &self.confidence;
        for v in [c.steer_mean, c.steer_std, c.pedal_mean, c.pedal_std, c.weight] {
            w.f64(v);
        }
        w.u64(self.seq);
        w.u64(self.compute_latency_us);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ControlProposal {
            pipeline_id: r.str()?,
            command: read_command(r)?,
            confidence: ConfidenceModel {
                steer_mean: r.f64()?,
                steer_std: r.f64()?,
                pedal_mean: r.f64()?,
                pedal_std: r.f64()?,
                weight: r.f64()?,
            },
            seq: r.u64()?,
            compute_latency_us: r.u64()?,
        })
    }
}

impl Payload for VehicleStateEstimate {
    const TAG: u8 = tags::STATE_ESTIMATE;
    fn write_body(&self, w: &mut Writer) {
        for v in [self.x, self.y, self.heading, self.speed, self.yaw_rate] {
            w.f64(v);
        }
        for v in self.cov_diag {
            w.f64(v);
        }
        w.bool(self.gps_valid);
        w.u64(self.timestamp_ns);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(VehicleStateEstimate {
            x: r.f64()?,
            y: r.f64()?,
            heading: r.f64()?,
            speed: r.f64()?,
            yaw_rate: r.f64()?,
            cov_diag: [r.f64()?, r.f64()?, r.f64()?, r.f64()?],
            gps_valid: r.bool()?,
            timestamp_ns: r.u64()?,
        })
    }
}

impl Payload for HealthReport {
    const TAG: u8 = tags::HEALTH_REPORT;
    fn write_body(&self, w: &mut Writer) {
        w.str(&self.pipeline_id);
        w.u8(self.status.code());
        w.f64(self.heartbeat_age_ms);
        w.f64(self.proposal_rate_hz);
        w.u32(self.restart_count);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(HealthReport {
            pipeline_id: r.str()?,
            status: HealthStatus::from_code(r.u8()?)?,
            heartbeat_age_ms: r.f64()?,
            proposal_rate_hz: r.f64()?,
            restart_count: r.u32()?,
        })
    }
}

impl Payload for StateChange {
    const TAG: u8 = tags::STATE_CHANGE;
    fn write_body(&self, w: &mut Writer) {
        w.u8(self.from.code());
        w.u8(self.to.code());
        w.u8(self.event.code());
        w.u64(self.timestamp_ns);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(StateChange {
            from: AsState::from_code(r.u8()?)?,
            to: AsState::from_code(r.u8()?)?,
            event: AsEvent::from_code(r.u8()?)?,
            timestamp_ns: r.u64()?,
        })
    }
}

impl Payload for AsEventMsg {
    const TAG: u8 = tags::AS_EVENT;
    fn write_body(&self, w: &mut Writer) {
        w.u8(self.event.code());
        w.u64(self.timestamp_ns);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(AsEventMsg {
            event: AsEvent::from_code(r.u8()?)?,
            timestamp_ns: r.u64()?,
        })
    }
}

impl Payload for HmiCommand {
    const TAG: u8 = tags::HMI_COMMAND;
    fn write_body(&self, w: &mut Writer) {
        match &self.kind {
            HmiCommandKind::SetSafetyMargin { value } => {
                w.u8(0);
                w.f64(*value);
            }
            HmiCommandKind::SetPriority {
                pipeline_id,
                priority,
            } => {
                w.u8(1);
                w.str(pipeline_id);
                w.f64(*priority);
            }
            HmiCommandKind::SelectPipeline { pipeline_id } => {
                w.u8(2);
                w.opt_str(pipeline_id.as_deref());
            }
            HmiCommandKind::TeleopAxes { steering, pedal } => {
                w.u8(3);
                w.f64(*steering);
                w.f64(*pedal);
            }
            HmiCommandKind::Estop => w.u8(4),
            HmiCommandKind::MissionStart => w.u8(5),
            HmiCommandKind::Reset => w.u8(6),
        }
        w.str(&self.client_id);
        w.u64(self.timestamp_ns);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let kind = match r.u8()? {
            0 => HmiCommandKind::SetSafetyMargin { value: r.f64()? },
            1 => HmiCommandKind::SetPriority {
                pipeline_id: r.str()?,
                priority: r.f64()?,
            },
            2 => HmiCommandKind::SelectPipeline {
                pipeline_id: r.opt_str()?,
            },
            3 => HmiCommandKind::TeleopAxes {
                steering: r.f64()?,
                pedal: r.f64()?,
            },
            4 => HmiCommandKind::Estop,
            5 => HmiCommandKind::MissionStart,
            6 => HmiCommandKind::Reset,
            k => return Err(CodecError::Invalid(format!("HMI command kind {k}"))),
        };
        Ok(HmiCommand {
            kind,
            client_id: r.str()?,
            timestamp_ns: r.u64()?,
        })
    }
}

impl Payload for PoseMeasurement {
    const TAG: u8 = tags::POSE;
    fn write_body(&self, w: &mut Writer) {
        w.f64(self.x);
        w.f64(self.y);
        w.f64(self.heading);
        w.u64(self.timestamp_ns);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(PoseMeasurement {
            x: r.f64()?,
            y: r.f64()?,
            heading: r.f64()?,
            timestamp_ns: r.u64()?,
        })
    }
}

impl Payload for WheelSpeed {
    const TAG: u8 = tags::WHEEL_SPEED;
    fn write_body(&self, w: &mut Writer) {
        w.f64(self.speed);
        w.u64(self.timestamp_ns);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(WheelSpeed {
            speed: r.f64()?,
            timestamp_ns: r.u64()?,
        })
    }
}

impl Payload for Heartbeat {
    const TAG: u8 = tags::HEARTBEAT;
    fn write_body(&self, w: &mut Writer) {
        w.str(&self.unit_id);
        w.u64(self.tick_ns);
        w.u8(self.self_status.code());
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Heartbeat {
            unit_id: r.str()?,
            tick_ns: r.u64()?,
            self_status: HealthStatus::from_code(r.u8()?)?,
        })
    }
}

impl Payload for MarginUpdate {
    const TAG: u8 = tags::MARGIN;
    fn write_body(&self, w: &mut Writer) {
        w.f64(self.margin);
        w.f64(self.degradation);
        w.u64(self.timestamp_ns);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(MarginUpdate {
            margin: r.f64()?,
            degradation: r.f64()?,
            timestamp_ns: r.u64()?,
        })
    }
}

impl Payload for LapEvent {
    const TAG: u8 = tags::LAP_EVENT;
    fn write_body(&self, w: &mut Writer) {
        w.u32(self.lap);
        w.f64(self.lap_time_s);
        w.u64(self.timestamp_ns);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(LapEvent {
            lap: r.u32()?,
            lap_time_s: r.f64()?,
            timestamp_ns: r.u64()?,
        })
    }
}

impl Payload for SupervisorNotice {
    const TAG: u8 = tags::NOTICE;
    fn write_body(&self, w: &mut Writer) {
        match self {
            SupervisorNotice::TransitionRejected { state, event } => {
                w.u8(0);
                w.u8(state.code());
                w.u8(event.code());
            }
            SupervisorNotice::ResourceAlarm { unit_id, detail } => {
                w.u8(1);
                w.str(unit_id);
                w.str(detail);
            }
            SupervisorNotice::UnitPermanentlyDead { unit_id } => {
                w.u8(2);
                w.str(unit_id);
            }
            SupervisorNotice::Info(s) => {
                w.u8(3);
                w.str(s);
            }
        }
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(match r.u8()? {
            0 => SupervisorNotice::TransitionRejected {
                state: AsState::from_code(r.u8()?)?,
                event: AsEvent::from_code(r.u8()?)?,
            },
            1 => SupervisorNotice::ResourceAlarm {
                unit_id: r.str()?,
                detail: r.str()?,
            },
            2 => SupervisorNotice::UnitPermanentlyDead { unit_id: r.str()? },
            3 => SupervisorNotice::Info(r.str()?),
            k => return Err(CodecError::Invalid(format!("notice kind {k}"))),
        })
    }
}

impl Payload for MissionStatus {
    const TAG: u8 = tags::MISSION_STATUS;
    fn write_body(&self, w: &mut Writer) {
        w.u32(self.laps_done);
        w.u32(self.laps_total);
        w.u32(self.lap_times.len() as u32);
        for t in &self.lap_times {
            w.f64(*t);
        }
        match self.total_s {
            Some(t) => {
                w.u8(1);
                w.f64(t);
            }
            None => w.u8(0),
        }
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let laps_done = r.u32()?;
        let laps_total = r.u32()?;
        let n = r.u32()? as usize;
        if n > 100_000 {
            return Err(CodecError::Invalid(format!("{n} lap times")));
        }
        let lap_times = (0..n).map(|_| r.f64()).collect::<Result<_, _>>()?;
        let total_s = if r.bool()? { Some(r.f64()?) } else { None };
        Ok(MissionStatus {
            laps_done,
            laps_total,
            lap_times,
            total_s,
        })
    }
}

impl Payload for SimTruth {
    const TAG: u8 = tags::SIM_TRUTH;
    fn write_body(&self, w: &mut Writer) {
        w.u64(self.t_ns);
        for v in [
            self.x,
            self.y,
            self.heading,
            self.speed,
            self.steer_angle,
            self.s,
            self.lateral_offset,
        ] {
            w.f64(v);
        }
        w.bool(self.off_track);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(SimTruth {
            t_ns: r.u64()?,
            x: r.f64()?,
            y: r.f64()?,
            heading: r.f64()?,
            speed: r.f64()?,
            steer_angle: r.f64()?,
            s: r.f64()?,
            lateral_offset: r.f64()?,
            off_track: r.bool()?,
        })
    }
}

impl Payload for ScoreReport {
    const TAG: u8 = tags::SCORE_REPORT;
    fn write_body(&self, w: &mut Writer) {
        w.u64(self.timestamp_ns);
        w.u32(self.entries.len() as u32);
        for e in &self.entries {
            w.str(&e.pipeline_id);
            w.f64(e.score);
            w.bool(e.admissible);
            w.opt_str(e.reason.as_deref());
        }
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let timestamp_ns = r.u64()?;
        let n = r.u32()? as usize;
        if n > 4096 {
            return Err(CodecError::Invalid(format!("{n} score entries")));
        }
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            entries.push(PipelineScore {
                pipeline_id: r.str()?,
                score: r.f64()?,
                admissible: r.bool()?,
                reason: r.opt_str()?,
            });
        }
        Ok(ScoreReport { timestamp_ns, entries })
    }
}

impl Payload for ResourceUsage {
    const TAG: u8 = tags::RESOURCE_USAGE;
    fn write_body(&self, w: &mut Writer) {
        w.str(&self.unit_id);
        w.f64(self.cpu_fraction);
        w.u64(self.rss_bytes);
        w.u64(self.timestamp_ns);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ResourceUsage {
            unit_id: r.str()?,
            cpu_fraction: r.f64()?,
            rss_bytes: r.u64()?,
            timestamp_ns: r.u64()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn validate_examples() {
        assert!(validate_command(NormalizedCommand::new(0.0, 0.0, 0)).is_ok());
        assert_eq!(
            validate_command(NormalizedCommand::new(1.0001, 0.0, 0)),
            Err(CommandError::RangeViolation {
                channel: Channel::Steering,
                value: 1.0001
            })
        );
        assert_eq!(
            validate_command(NormalizedCommand::new(f64::NAN, 0.5, 0)),
            Err(CommandError::Malformed(Channel::Steering))
        );
        assert_eq!(
            validate_command(NormalizedCommand::new(0.0, f64::INFINITY, 0)),
            Err(CommandError::Malformed(Channel::Pedal))
        );
        assert!(validate_command(NormalizedCommand::new(-1.0, 1.0, 0)).is_ok());
    }

    fn conf(s: f64, p: f64, w: f64) -> ConfidenceModel {
        ConfidenceModel {
            steer_mean: 0.0,
            steer_std: s,
            pedal_mean: 0.0,
            pedal_std: p,
            weight: w,
        }
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence_scalar(&conf(0.0, 0.0, 1.0)), 1.0);
        assert_eq!(confidence_scalar(&conf(0.0, 0.0, 0.5)), 0.5);
        // exp(-1) to 4 decimals
        assert!((confidence_scalar(&conf(0.5, 0.5, 1.0)) - 0.3679).abs() < 5e-5);
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    proptest! {
        #[test]
        fn wrap_range(a in -1e4f64..1e4) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI && w <= PI);
            let k = ((a - w) / (2.0 * PI)).round();
            prop_assert!((a - w - k * 2.0 * PI).abs() < 1e-8);
        }

        #[test]
        fn confidence_is_monotone(s in 0.0f64..5.0, p in 0.0f64..5.0, w in 0.0f64..=1.0, d in 1e-6f64..2.0) {
            let base = confidence_scalar(&conf(s, p, w));
            prop_assert!(confidence_scalar(&conf(s + d, p, w)) <= base);
            prop_assert!(confidence_scalar(&conf(s, p + d, w)) <= base);
            if w > 0.0 {
                prop_assert!(confidence_scalar(&conf(s + d, p, w)) < base);
            }
        }

        #[test]
        fn proposal_roundtrip(id in "[a-z]{1,12}", st in -1.0f64..1.0, pd in -1.0f64..1.0, ts: u64,
                              ss in 0.0f64..1.0, ps in 0.0f64..1.0, w in 0.0f64..1.0, seq: u64, lat: u64) {
            let command = NormalizedCommand::new(st, pd, ts);
            let p = ControlProposal {
                pipeline_id: id,
                command,
                confidence: ConfidenceModel::around(&command, ss, ps, w),
                seq,
                compute_latency_us: lat,
            };
            let bytes = p.to_payload();
            prop_assert_eq!(bytes[0], 0x02);
            let q = ControlProposal::from_payload(&bytes).unwrap();
            prop_assert_eq!(q.to_payload(), bytes);
            prop_assert_eq!(q, p);
        }

        #[test]
        fn estimate_roundtrip(v in prop::array::uniform9(-1e3f64..1e3), gps: bool, ts: u64) {
            let e = VehicleStateEstimate {
                x: v[0], y: v[1], heading: v[2], speed: v[3], yaw_rate: v[4],
                cov_diag: [v[5].abs(), v[6].abs(), v[7].abs(), v[8].abs()],
                gps_valid: gps, timestamp_ns: ts,
            };
            let bytes = e.to_payload();
            prop_assert_eq!(bytes[0], 0x03);
            prop_assert_eq!(VehicleStateEstimate::from_payload(&bytes).unwrap(), e);
        }
    }

    #[test]
    fn tagged_roundtrips() {
        let cmd = NormalizedCommand::new(0.25, -0.5, 99);
        assert_eq!(cmd.to_payload()[0], 0x01);
        assert_eq!(NormalizedCommand::from_payload(&cmd.to_payload()).unwrap(), cmd);

        let h = HealthReport {
            pipeline_id: "classic".into(),
            status: HealthStatus::Degraded,
            heartbeat_age_ms: 12.5,
            proposal_rate_hz: 50.0,
            restart_count: 2,
        };
        assert_eq!(h.to_payload()[0], 0x04);
        assert_eq!(HealthReport::from_payload(&h.to_payload()).unwrap(), h);

        let sc = StateChange {
            from: AsState::Ready,
            to: AsState::Driving,
            event: AsEvent::MissionStart,
            timestamp_ns: 5,
        };
        assert_eq!(sc.to_payload()[0], 0x05);
        assert_eq!(StateChange::from_payload(&sc.to_payload()).unwrap(), sc);

        let ev = AsEventMsg {
            event: AsEvent::EStop,
            timestamp_ns: 1,
        };
        assert_eq!(ev.to_payload()[0], 0x06);
        assert_eq!(AsEventMsg::from_payload(&ev.to_payload()).unwrap(), ev);

        for kind in [
            HmiCommandKind::SetSafetyMargin { value: 0.8 },
            HmiCommandKind::SetPriority {
                pipeline_id: "teleop".into(),
                priority: 3.0,
            },
            HmiCommandKind::SelectPipeline { pipeline_id: None },
            HmiCommandKind::SelectPipeline {
                pipeline_id: Some("teleop".into()),
            },
            HmiCommandKind::TeleopAxes {
                steering: 0.3,
                pedal: -0.2,
            },
            HmiCommandKind::Estop,
            HmiCommandKind::MissionStart,
            HmiCommandKind::Reset,
        ] {
            let c = HmiCommand {
                kind,
                client_id: "pit".into(),
                timestamp_ns: 7,
            };
            assert_eq!(c.to_payload()[0], 0x07);
            assert_eq!(HmiCommand::from_payload(&c.to_payload()).unwrap(), c);
        }

        let ms = MissionStatus {
            laps_done: 2,
            laps_total: 3,
            lap_times: vec![30.0, 25.1],
            total_s: None,
        };
        assert_eq!(MissionStatus::from_payload(&ms.to_payload()).unwrap(), ms);
        let n = SupervisorNotice::TransitionRejected {
            state: AsState::Off,
            event: AsEvent::MissionStart,
        };
        assert_eq!(SupervisorNotice::from_payload(&n.to_payload()).unwrap(), n);

        let sr = ScoreReport {
            timestamp_ns: 3,
            entries: vec![
                PipelineScore {
                    pipeline_id: "classic".into(),
                    score: 0.9,
                    admissible: true,
                    reason: None,
                },
                PipelineScore {
                    pipeline_id: "teleop".into(),
                    score: 0.0,
                    admissible: false,
                    reason: Some("stale".into()),
                },
            ],
        };
        assert_eq!(sr.to_payload()[0], 0x1A);
        assert_eq!(ScoreReport::from_payload(&sr.to_payload()).unwrap(), sr);
        let ru = ResourceUsage {
            unit_id: "classic".into(),
            cpu_fraction: 0.25,
            rss_bytes: 1 << 20,
            timestamp_ns: 4,
        };
        assert_eq!(ResourceUsage::from_payload(&ru.to_payload()).unwrap(), ru);
    }

    #[test]
    fn codec_errors() {
        let cmd = NormalizedCommand::new(0.0, 0.0, 0).to_payload();
        assert!(matches!(
            ControlProposal::from_payload(&cmd),
            Err(CodecError::WrongTag { .. })
        ));
        assert_eq!(
            NormalizedCommand::from_payload(&cmd[..5]),
            Err(CodecError::Truncated)
        );
        let mut long = cmd.clone();
        long.push(0);
        assert_eq!(NormalizedCommand::from_payload(&long), Err(CodecError::Trailing(1)));
        assert_eq!(NormalizedCommand::from_payload(&[]), Err(CodecError::Empty));
    }
}
