use serde::{Deserialize, Serialize};

use crate::model::{ConfidenceModel, NormalizedCommand};

use super::{fresh_estimate, Pipeline, PipelineConfig, TickInput, TickOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopParams {
    /// Largest steering change per tick.
    pub steer_rate: f64,
    /// Input younger than this earns full weight.
    pub fresh_ms: f64,
    /// Weight reaches zero at this input age.
    pub timeout_ms: f64,
}

impl Default for TeleopParams {
    fn default() -> Self {
        TeleopParams {
            steer_rate: 0.1,
            fresh_ms: 250.0,
            timeout_ms: 1000.0,
        }
    }
}

pub const TELEOP_STD: f64 = 0.02;

/// Weight for operator input of the given age.
pub fn input_weight(age_ms: f64, p: &TeleopParams) -> f64 {
    if age_ms < p.fresh_ms {
        1.0
    } else if age_ms >= p.timeout_ms {
        0.0
    } else {
        1.0 - (age_ms - p.fresh_ms) / (p.timeout_ms - p.fresh_ms)
    }
}

/// Operator axes passed through with a steering rate limit.
pub struct Teleop {
    cfg: PipelineConfig,
    steering: f64,
}

impl Teleop {
    pub fn new(cfg: PipelineConfig) -> Self {
        Teleop { cfg, steering: 0.0 }
    }
}

impl Pipeline for Teleop {
    fn id(&self) -> &str {
        &self.cfg.id
    }

    fn tick(&mut self, input: &TickInput<'_>) -> TickOutcome {
        if let Err(r) = fresh_estimate(input, self.cfg.staleness_ms) {
            return TickOutcome::Withhold(r);
        }
        let p = &self.cfg.teleop;
        let (target, pedal, weight) = match input.teleop {
            None => (0.0, 0.0, 0.0),
            Some(t) => {
                let age_ms = input.now_ns.saturating_sub(t.received_ns) as f64 / 1e6;
                (t.steering.clamp(-1.0, 1.0), t.pedal.clamp(-1.0, 1.0), input_weight(age_ms, p))
            }
        };
        self.steering += (target - self.steering).clamp(-p.steer_rate, p.steer_rate);
        let command = NormalizedCommand::new(self.steering, pedal, input.now_ns);
        TickOutcome::Propose {
            command,
            confidence: ConfidenceModel::around(&command, TELEOP_STD, TELEOP_STD, weight),
        }
    }
}
