use std::sync::Arc;

use crate::model::{ConfidenceModel, NormalizedCommand};
use crate::sim::TrackModel;

use super::pursuit::{preview_horizon, pursuit_steering, speed_pedal, speed_target};
use super::{fresh_estimate, Pipeline, PipelineConfig, TickInput, TickOutcome, WithholdReason};

pub const CLASSIC_STD: f64 = 0.05;

/// Pure pursuit on the centerline with a curvature-limited speed profile.
pub struct Classic {
    cfg: PipelineConfig,
    track: Arc<TrackModel>,
}

impl Classic {
    pub fn new(cfg: PipelineConfig, track: Arc<TrackModel>) -> Self {
        Classic { cfg, track }
    }

    /// The raw command, without confidence.
    pub fn command(&self, input: &TickInput<'_>) -> Result<NormalizedCommand, WithholdReason> {
        let est = fresh_estimate(input, self.cfg.staleness_ms)?;
        let (steering, s) = pursuit_steering(est, &self.track, &self.cfg.pursuit, &self.cfg.geometry)
            .map_err(|_| WithholdReason::NoTarget)?;
        let kappa = self.track.max_abs_curvature_ahead(s, preview_horizon(est.speed));
        let v_target = speed_target(kappa, &self.cfg.pursuit, input.budget);
        let pedal = speed_pedal(v_target, est.speed, &self.cfg.pursuit);
        Ok(NormalizedCommand::new(steering, pedal, input.now_ns))
    }
}

impl Pipeline for Classic {
    fn id(&self) -> &str {
        &self.cfg.id
    }

    fn tick(&mut self, input: &TickInput<'_>) -> TickOutcome {
        match self.command(input) {
            Ok(command) => TickOutcome::Propose {
                command,
                confidence: ConfidenceModel::around(&command, CLASSIC_STD, CLASSIC_STD, 1.0),
            },
            Err(r) => TickOutcome::Withhold(r),
        }
    }
}
