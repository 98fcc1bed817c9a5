//! Driver pipelines: a common contract and three reference agents.

mod classic;
pub mod pursuit;
pub mod runner;
mod stochastic;
mod teleop;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::model::{ConfidenceModel, NormalizedCommand, VehicleStateEstimate};
use crate::sim::TrackModel;

pub use classic::Classic;
pub use pursuit::{PursuitError, PursuitParams};
pub use stochastic::{Stochastic, StochasticParams};
pub use teleop::{Teleop, TeleopParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Classic,
    Stochastic,
    Teleop,
}

impl PipelineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineKind::Classic => "classic",
            PipelineKind::Stochastic => "stochastic",
            PipelineKind::Teleop => "teleop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleGeometry {
    pub wheelbase: f64,
    pub delta_max: f64,
}

impl Default for VehicleGeometry {
    fn default() -> Self {
        VehicleGeometry {
            wheelbase: 2.9,
            delta_max: 0.35,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Pursuit(#[from] PursuitError),
    #[error(transparent)]
    Track(#[from] crate::sim::TrackError),
    #[error(transparent)]
    Bus(#[from] crate::bus::BusError),
}

/// Everything a pipeline process needs; serialized to TOML and handed to the
/// executable through `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub id: String,
    pub kind: PipelineKind,
    #[serde(default = "default_tick_rate")]
    pub tick_rate_hz: f64,
    #[serde(default = "default_staleness")]
    pub staleness_ms: f64,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_period_ms: f64,
    #[serde(default)]
    pub seed: u64,
    /// Centerline CSV.
    pub track: String,
    #[serde(default)]
    pub geometry: VehicleGeometry,
    #[serde(default)]
    pub pursuit: PursuitParams,
    #[serde(default)]
    pub stochastic: StochasticParams,
    #[serde(default)]
    pub teleop: TeleopParams,
}

fn default_tick_rate() -> f64 {
    50.0
}
fn default_staleness() -> f64 {
    200.0
}
fn default_heartbeat() -> f64 {
    100.0
}

impl PipelineConfig {
    pub fn new(id: impl Into<String>, kind: PipelineKind, track: impl Into<String>) -> Self {
        PipelineConfig {
            id: id.into(),
            kind,
            tick_rate_hz: default_tick_rate(),
            staleness_ms: default_staleness(),
            heartbeat_period_ms: default_heartbeat(),
            seed: 0,
            track: track.into(),
            geometry: VehicleGeometry::default(),
            pursuit: PursuitParams::default(),
            stochastic: StochasticParams::default(),
            teleop: TeleopParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        crate::bus::validate_topic(&self.id)
            .map_err(|_| PipelineError::Config(format!("pipeline id {:?} is not a topic segment", self.id)))?;
        if self.id.contains('/') {
            return Err(PipelineError::Config("pipeline id must not contain '/'".into()));
        }
        if !(self.tick_rate_hz > 0.0 && self.staleness_ms > 0.0 && self.heartbeat_period_ms > 0.0) {
            return Err(PipelineError::Config("rates and budgets must be positive".into()));
        }
        if !(self.geometry.wheelbase > 0.0 && self.geometry.delta_max > 0.0) {
            return Err(PipelineError::Config("vehicle geometry must be positive".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(PipelineError::Config("seed exceeds the signed 64-bit range".into()));
        }
        self.pursuit.validate()?;
        self.stochastic.validate()?;
        Ok(())
    }

    pub fn period_ns(&self) -> u64 {
        (1e9 / self.tick_rate_hz).round() as u64
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Operator axes as last received, stamped with the pipeline's clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeleopInput {
    pub steering: f64,
    pub pedal: f64,
    pub received_ns: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct TickInput<'a> {
    pub now_ns: u64,
    pub estimate: Option<&'a VehicleStateEstimate>,
    /// Safety margin times degradation factor.
    pub budget: f64,
    pub teleop: Option<TeleopInput>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WithholdReason {
    NoEstimate,
    StaleEstimate { age_ms: f64 },
    NoTarget,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TickOutcome {
    Propose {
        command: NormalizedCommand,
        confidence: ConfidenceModel,
    },
    Withhold(WithholdReason),
}

pub trait Pipeline: Send {
    fn id(&self) -> &str;
    fn tick(&mut self, input: &TickInput<'_>) -> TickOutcome;
}

/// The estimate if it is no older than `staleness_ms` at `now_ns`.
pub fn fresh_estimate<'a>(
    input: &TickInput<'a>,
    staleness_ms: f64,
) -> Result<&'a VehicleStateEstimate, WithholdReason> {
    let est = input.estimate.ok_or(WithholdReason::NoEstimate)?;
    let age_ms = input.now_ns.saturating_sub(est.timestamp_ns) as f64 / 1e6;
    if age_ms > staleness_ms {
        return Err(WithholdReason::StaleEstimate { age_ms });
    }
    Ok(est)
}

pub fn build(cfg: &PipelineConfig, track: Arc<TrackModel>) -> Result<Box<dyn Pipeline>, PipelineError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        PipelineKind::Classic => Box::new(Classic::new(cfg.clone(), track)),
        PipelineKind::Stochastic => Box::new(Stochastic::new(cfg.clone(), track)),
        PipelineKind::Teleop => Box::new(Teleop::new(cfg.clone())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_roundtrip() {
        let mut cfg = PipelineConfig::new("classic", PipelineKind::Classic, "tracks/oval.csv");
        cfg.seed = 9;
        cfg.pursuit.v_cap = 7.0;
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_bad_ids() {
        let cfg = PipelineConfig::new("a/b", PipelineKind::Classic, "t.csv");
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig::new("", PipelineKind::Classic, "t.csv");
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn staleness_rule() {
        let est = VehicleStateEstimate {
            timestamp_ns: 1_000_000_000,
            ..Default::default()
        };
        let input = TickInput {
            now_ns: 1_500_000_000,
            estimate: Some(&est),
            budget: 1.0,
            teleop: None,
        };
        assert!(matches!(
            fresh_estimate(&input, 200.0),
            Err(WithholdReason::StaleEstimate { .. })
        ));
        let input = TickInput {
            now_ns: 1_100_000_000,
            ..input
        };
        assert!(fresh_estimate(&input, 200.0).is_ok());
    }
}
