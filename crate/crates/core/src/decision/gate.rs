use crate::model::{validate_command, ControlProposal};
use crate::pipelines::VehicleGeometry;

use super::ArbitrationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateReason {
    Stale,
    Invalid,
    RateLimit,
    LatAccel,
    LowConfidence,
}

impl GateReason {
    pub fn as_str(self) -> &'static str {
        match self {
            GateReason::Stale => "Stale",
            GateReason::Invalid => "Invalid",
            GateReason::RateLimit => "RateLimit",
            GateReason::LatAccel => "LatAccel",
            GateReason::LowConfidence => "LowConfidence",
        }
    }
}

/// One-step lateral acceleration `speed² · |tan(steering·δmax) / L|`.
pub fn lateral_acceleration(speed: f64, steering: f64, geom: &VehicleGeometry) -> f64 {
    speed * speed * ((steering * geom.delta_max).tan() / geom.wheelbase).abs()
}

/// Admissibility of a proposal at `now_ns`. `prev_steering` is the steering
/// of the same pipeline's previous proposal; `budget` is margin times the
/// degradation factor.
pub fn safety_gate(
    p: &ControlProposal,
    now_ns: u64,
    speed: f64,
    prev_steering: Option<f64>,
    budget: f64,
    cfg: &ArbitrationConfig,
) -> Result<(), GateReason> {
    let age_ms = now_ns.saturating_sub(p.command.timestamp_ns) as f64 / 1e6;
    if age_ms > cfg.staleness_ms {
        return Err(GateReason::Stale);
    }
    if validate_command(p.command).is_err() || !p.confidence.is_valid() {
        return Err(GateReason::Invalid);
    }
    if let Some(prev) = prev_steering {
        if (p.command.steering - prev).abs() > cfg.r_max + 1e-12 {
            return Err(GateReason::RateLimit);
        }
    }
    if lateral_acceleration(speed, p.command.steering, &cfg.geometry) > cfg.a_lat_max * budget {
        return Err(GateReason::LatAccel);
    }
    if !(p.confidence.weight >= cfg.min_weight) {
        return Err(GateReason::LowConfidence);
    }
    Ok(())
}
