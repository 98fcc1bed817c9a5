use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{wrap_angle, PoseMeasurement, WheelSpeed};

use super::{SimError, SimState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sensor {
    Gps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FaultMode {
    Dropout,
    Noise { std_xy: f64, std_heading: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultEntry {
    pub sensor: Sensor,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(flatten)]
    pub mode: FaultMode,
}

impl FaultEntry {
    pub fn covers(&self, t: f64) -> bool {
        t >= self.t_start && t < self.t_end
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultSchedule {
    pub entries: Vec<FaultEntry>,
}

impl FaultSchedule {
    pub fn new(entries: Vec<FaultEntry>) -> Result<Self, SimError> {
        let s = FaultSchedule { entries };
        s.validate()?;
        Ok(s)
    }

    /// `duration`-second GPS dropouts every `period` seconds, the first at
    /// `first`, up to `until`.
    pub fn periodic_gps_dropouts(first: f64, period: f64, duration: f64, until: f64) -> Self {
        let mut entries = Vec::new();
        let mut t = first;
        while t < until {
            entries.push(FaultEntry {
                sensor: Sensor::Gps,
                t_start: t,
                t_end: t + duration,
                mode: FaultMode::Dropout,
            });
            t += period;
        }
        FaultSchedule { entries }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (i, e) in self.entries.iter().enumerate() {
            if !(e.t_start.is_finite() && e.t_end.is_finite() && e.t_start < e.t_end) {
                return Err(SimError::InvalidFaults(format!("entry {i}: t_start must precede t_end")));
            }
            if let FaultMode::Noise { std_xy, std_heading } = e.mode {
                if !(std_xy >= 0.0 && std_heading >= 0.0) {
                    return Err(SimError::InvalidFaults(format!("entry {i}: negative noise std")));
                }
            }
            for (j, f) in self.entries.iter().enumerate().skip(i + 1) {
                if e.sensor == f.sensor && e.t_start < f.t_end && f.t_start < e.t_end {
                    return Err(SimError::InvalidFaults(format!(
                        "entries {i} and {j} overlap on the same sensor"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn active(&self, sensor: Sensor, t: f64) -> Option<&FaultEntry> {
        self.entries.iter().find(|e| e.sensor == sensor && e.covers(t))
    }

    pub fn dropout_windows(&self) -> Vec<(f64, f64)> {
        self.entries
            .iter()
            .filter(|e| e.mode == FaultMode::Dropout)
            .map(|e| (e.t_start, e.t_end))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurements {
    /// Absent while a GPS dropout covers the sample time.
    pub pose: Option<PoseMeasurement>,
    pub wheel: WheelSpeed,
}

/// Samples the sensors at time `t` (seconds). Noise draws come from `rng`,
/// so a seeded generator reproduces the same measurement stream.
pub fn sense<R: Rng>(state: &SimState, faults: &FaultSchedule, t: f64, rng: &mut R) -> Measurements {
    let ts = (t * 1e9).round() as u64;
    let truth = PoseMeasurement {
        x: state.x,
        y: state.y,
        heading: state.heading,
        timestamp_ns: ts,
    };
    let pose = match faults.active(Sensor::Gps, t).map(|e| e.mode) {
        None => Some(truth),
        Some(FaultMode::Dropout) => None,
        Some(FaultMode::Noise { std_xy, std_heading }) => {
            let xy = Normal::new(0.0, std_xy).expect("validated std");
            let hd = Normal::new(0.0, std_heading).expect("validated std");
            Some(PoseMeasurement {
                x: truth.x + xy.sample(rng),
                y: truth.y + xy.sample(rng),
                heading: wrap_angle(truth.heading + hd.sample(rng)),
                timestamp_ns: ts,
            })
        }
    };
    Measurements {
        pose,
        wheel: WheelSpeed {
            speed: state.speed,
            timestamp_ns: ts,
        },
    }
}
