//! Decision logic: safety gate, scoring, arbitration with hysteresis, the
//! clutch that blends hand-overs, and the degradation factor.

mod arbiter;
mod clutch;
mod gate;

use serde::{Deserialize, Serialize};

use crate::model::codec::{CodecError, Payload, Reader, Writer};
use crate::model::{read_command, tags, write_command, HealthStatus, NormalizedCommand};
use crate::pipelines::VehicleGeometry;

pub use arbiter::{Arbiter, ArbitrationInput, Candidate, DecisionOutput, GateVerdict, Objective, StaticPriority};
pub use clutch::clutch_blend;
pub use gate::{lateral_acceleration, safety_gate, GateReason};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArbitrationConfig {
    pub hysteresis: f64,
    pub persistence: u32,
    /// Blend duration, s.
    pub blend_s: f64,
    pub staleness_ms: f64,
    /// Largest steering change per tick between a pipeline's consecutive
    /// proposals.
    pub r_max: f64,
    pub safe_stop_pedal: f64,
    pub min_weight: f64,
    /// Lateral-acceleration limit of the gate at margin 1, m/s².
    pub a_lat_max: f64,
    pub geometry: VehicleGeometry,
}

impl Default for ArbitrationConfig {
    fn default() -> Self {
        ArbitrationConfig {
            hysteresis: 0.2,
            persistence: 5,
            blend_s: 0.5,
            staleness_ms: 150.0,
            r_max: 0.1,
            safe_stop_pedal: -0.5,
            min_weight: 0.05,
            a_lat_max: 9.0,
            geometry: VehicleGeometry::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid arbitration config: {0}")]
pub struct ConfigError(pub String);

impl ArbitrationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let nonneg = [self.hysteresis, self.staleness_ms, self.r_max, self.min_weight];
        if !nonneg.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(ConfigError("thresholds must be non-negative".into()));
        }
        if !(self.blend_s > 0.0 && self.a_lat_max > 0.0) {
            return Err(ConfigError("blend duration and a_lat_max must be positive".into()));
        }
        if !(-1.0..=0.0).contains(&self.safe_stop_pedal) {
            return Err(ConfigError("safe-stop pedal must brake".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActiveSource {
    Pipeline(String),
    SafeStopFallback,
}

impl ActiveSource {
    pub fn pipeline_id(&self) -> Option<&str> {
        match self {
            ActiveSource::Pipeline(id) => Some(id),
            ActiveSource::SafeStopFallback => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendInfo {
    /// `None` when the blend starts from the fallback command.
    pub from_id: Option<String>,
    pub to_id: String,
    pub t_elapsed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectReason {
    Score,
    SafetyOverride,
    Fallback,
    HmiOverride,
}

impl SelectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectReason::Score => "Score",
            SelectReason::SafetyOverride => "SafetyOverride",
            SelectReason::Fallback => "Fallback",
            SelectReason::HmiOverride => "HmiOverride",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub active: ActiveSource,
    pub command: NormalizedCommand,
    pub blending: Option<BlendInfo>,
    pub reason: SelectReason,
}

impl Selection {
    pub fn fallback(command: NormalizedCommand) -> Self {
        Selection {
            active: ActiveSource::SafeStopFallback,
            command,
            blending: None,
            reason: SelectReason::Fallback,
        }
    }
}

impl Payload for Selection {
    const TAG: u8 = tags::SELECTION;
    fn write_body(&self, w: &mut Writer) {
        w.opt_str(self.active.pipeline_id());
        write_command(w, &self.command);
        match &self.blending {
            None => w.u8(0),
            Some(b) => {
                w.u8(1);
                w.opt_str(b.from_id.as_deref());
                w.str(&b.to_id);
                w.f64(b.t_elapsed);
            }
        }
        w.u8(match self.reason {
            SelectReason::Score => 0,
            SelectReason::SafetyOverride => 1,
            SelectReason::Fallback => 2,
            SelectReason::HmiOverride => 3,
        });
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let active = match r.opt_str()? {
            Some(id) => ActiveSource::Pipeline(id),
            None => ActiveSource::SafeStopFallback,
        };
        let command = read_command(r)?;
        let blending = match r.u8()? {
            0 => None,
            1 => Some(BlendInfo {
                from_id: r.opt_str()?,
                to_id: r.str()?,
                t_elapsed: r.f64()?,
            }),
            b => return Err(CodecError::Invalid(format!("blend flag {b}"))),
        };
        let reason = match r.u8()? {
            0 => SelectReason::Score,
            1 => SelectReason::SafetyOverride,
            2 => SelectReason::Fallback,
            3 => SelectReason::HmiOverride,
            c => return Err(CodecError::Invalid(format!("reason {c}"))),
        };
        Ok(Selection {
            active,
            command,
            blending,
            reason,
        })
    }
}

pub fn health_factor(h: HealthStatus) -> f64 {
    match h {
        HealthStatus::Healthy => 1.0,
        HealthStatus::Degraded => 0.5,
        _ => 0.0,
    }
}

/// `static_priority × health_factor × confidence_scalar`.
pub fn score(p: &crate::model::ControlProposal, static_priority: f64, health: HealthStatus) -> f64 {
    static_priority * health_factor(health) * crate::model::confidence_scalar(&p.confidence)
}

/// Scalar schedule standing in for physical degradation (e.g. tyre wear).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationState {
    pub factor: f64,
    pub per_lap_decrement: f64,
}

impl Default for DegradationState {
    fn default() -> Self {
        DegradationState {
            factor: 1.0,
            per_lap_decrement: 0.0,
        }
    }
}

pub const DEGRADATION_FLOOR: f64 = 0.3;

pub fn degradation_tick(lap_completed: bool, state: DegradationState) -> DegradationState {
    if !lap_completed {
        return state;
    }
    DegradationState {
        factor: (state.factor - state.per_lap_decrement).max(DEGRADATION_FLOOR),
        ..state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConfidenceModel, ControlProposal};

    #[test]
    fn score_examples() {
        let cmd = NormalizedCommand::new(0.0, 0.0, 0);
        let p = ControlProposal {
            pipeline_id: "a".into(),
            command: cmd,
            confidence: ConfidenceModel::around(&cmd, 0.0, 0.0, 0.9),
            seq: 1,
            compute_latency_us: 0,
        };
        assert!((score(&p, 1.0, HealthStatus::Healthy) - 0.9).abs() < 1e-15);
        assert_eq!(score(&p, 1.0, HealthStatus::Unhealthy), 0.0);
        assert_eq!(score(&p, 1.0, HealthStatus::Dead), 0.0);
        assert!((score(&p, 1.0, HealthStatus::Degraded) - 0.45).abs() < 1e-15);
        assert_eq!(score(&p, 2.0, HealthStatus::Healthy), 2.0 * score(&p, 1.0, HealthStatus::Healthy));
    }

    #[test]
    fn degradation_examples() {
        let mut s = DegradationState::default();
        for _ in 0..10 {
            s = degradation_tick(true, s);
        }
        assert_eq!(s.factor, 1.0);
        let mut s = DegradationState {
            factor: 1.0,
            per_lap_decrement: 0.05,
        };
        for _ in 0..3 {
            s = degradation_tick(true, s);
        }
        assert!((s.factor - 0.85).abs() < 1e-12);
        assert_eq!(degradation_tick(false, s), s);
        for _ in 0..17 {
            s = degradation_tick(true, s);
        }
        assert_eq!(s.factor, 0.3);
    }

    #[test]
    fn selection_roundtrip() {
        let sel = Selection {
            active: ActiveSource::Pipeline("classic".into()),
            command: NormalizedCommand::new(0.1, -0.2, 7),
            blending: Some(BlendInfo {
                from_id: None,
                to_id: "classic".into(),
                t_elapsed: 0.12,
            }),
            reason: SelectReason::SafetyOverride,
        };
        let bytes = sel.to_payload();
        assert_eq!(bytes[0], 0x12);
        assert_eq!(Selection::from_payload(&bytes).unwrap(), sel);
        let fb = Selection::fallback(NormalizedCommand::new(0.0, -0.5, 1));
        assert_eq!(Selection::from_payload(&fb.to_payload()).unwrap(), fb);
    }
}
