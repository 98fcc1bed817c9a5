//! Kinematic race-car simulator: track geometry, plant, sensors with fault
//! injection, and lap accounting.

mod laps;
mod plant;
mod sensors;
mod track;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::ActuatorSetpoints;
use crate::model::SimTruth;

pub use laps::{lap_tick, LapCounter};
pub use plant::{step, SimState, VehicleParams, MAX_DT};
pub use sensors::{sense, FaultEntry, FaultMode, FaultSchedule, Measurements, Sensor};
pub use track::{three_point_curvature, Progress, TrackError, TrackModel, TrackSample, CSV_HEADER, MIN_SAMPLES};

#[cfg(test)]
pub(crate) use track::tests::{circle, straight};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("non-finite simulator input")]
    NonFinite,
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
    #[error("invalid fault schedule: {0}")]
    InvalidFaults(String),
    #[error(transparent)]
    Track(#[from] TrackError),
}

/// Pose at the start of the track, aligned with the first segment, at rest.
pub fn start_state(track: &TrackModel) -> SimState {
    let s = track.samples();
    SimState {
        x: s[0].x,
        y: s[0].y,
        heading: (s[1].y - s[0].y).atan2(s[1].x - s[0].x),
        ..Default::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub progress: Progress,
    pub lap_completed: bool,
}

/// One simulation instance. Time is kept as an integer count of
/// nanoseconds so long runs do not accumulate rounding drift.
pub struct Simulator {
    params: VehicleParams,
    track: Arc<TrackModel>,
    faults: FaultSchedule,
    state: SimState,
    rng: ChaCha8Rng,
    dt_ns: u64,
    t_ns: u64,
    laps: LapCounter,
    progress: Progress,
}

impl Simulator {
    pub fn new(
        params: VehicleParams,
        track: Arc<TrackModel>,
        faults: FaultSchedule,
        dt: f64,
        seed: u64,
    ) -> Result<Self, SimError> {
        params.validate()?;
        faults.validate()?;
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(SimError::InvalidStep(format!("dt {dt} outside (0, {MAX_DT}]")));
        }
        let state = start_state(&track);
        let progress = track.progress(state.x, state.y)?;
        Ok(Simulator {
            params,
            track,
            faults,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dt_ns: (dt * 1e9).round() as u64,
            t_ns: 0,
            laps: LapCounter::new(),
            progress,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn track(&self) -> &Arc<TrackModel> {
        &self.track
    }

    pub fn faults(&self) -> &FaultSchedule {
        &self.faults
    }

    pub fn t_ns(&self) -> u64 {
        self.t_ns
    }

    pub fn dt_ns(&self) -> u64 {
        self.dt_ns
    }

    pub fn laps(&self) -> u32 {
        self.laps.laps
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn step(&mut self, act: &ActuatorSetpoints) -> Result<StepOutcome, SimError> {
        let dt = self.dt_ns as f64 / 1e9;
        let mut next = step(&self.state, act, &self.params, dt)?;
        self.t_ns += self.dt_ns;
        next.t = self.t_ns as f64 / 1e9;
        let progress = self.track.progress(next.x, next.y)?;
        let (laps, lap_completed) = if self.track.closed {
            lap_tick(self.progress.s, progress.s, self.track.length(), !progress.off_track, self.laps)
        } else {
            (self.laps, false)
        };
        self.state = next;
        self.progress = progress;
        self.laps = laps;
        Ok(StepOutcome {
            progress,
            lap_completed,
        })
    }

    pub fn sense(&mut self) -> Measurements {
        sense(&self.state, &self.faults, self.t_ns as f64 / 1e9, &mut self.rng)
    }

    pub fn truth(&self) -> SimTruth {
        SimTruth {
            t_ns: self.t_ns,
            x: self.state.x,
            y: self.state.y,
            heading: self.state.heading,
            speed: self.state.speed,
            steer_angle: self.state.steer_angle,
            s: self.progress.s,
            lateral_offset: self.progress.lateral_offset,
            off_track: self.progress.off_track,
        }
    }
}
