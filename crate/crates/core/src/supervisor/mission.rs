use serde::{Deserialize, Serialize};

use crate::model::{AsState, MissionStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum MissionFormat {
    TimeAttack { warmup_laps: u32, flying_laps: u32 },
    FixedLaps { n: u32 },
}

impl MissionFormat {
    pub fn total_laps(self) -> u32 {
        match self {
            MissionFormat::TimeAttack { warmup_laps, flying_laps } => warmup_laps + flying_laps,
            MissionFormat::FixedLaps { n } => n,
        }
    }

    /// Role of the 1-based lap number.
    pub fn role(self, lap: u32) -> LapRole {
        match self {
            MissionFormat::TimeAttack { warmup_laps, .. } if lap <= warmup_laps => LapRole::Warmup,
            MissionFormat::TimeAttack { .. } => LapRole::Flying,
            MissionFormat::FixedLaps { .. } => LapRole::Timed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LapRole {
    Warmup,
    Flying,
    /// Every lap of a fixed-laps run counts.
    Timed,
}

impl LapRole {
    pub fn counts(self) -> bool {
        !matches!(self, LapRole::Warmup)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LapRole::Warmup => "warmup",
            LapRole::Flying => "flying",
            LapRole::Timed => "timed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionSpec {
    #[serde(flatten)]
    pub format: MissionFormat,
    pub track: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LapRecord {
    pub lap: u32,
    pub role: LapRole,
    pub time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MissionUpdate {
    Ignored,
    Recorded(LapRole),
    Complete { total_s: f64 },
}

/// Sum of the lap times whose role counts.
pub fn mission_total(laps: &[LapRecord]) -> f64 {
    laps.iter().filter(|l| l.role.counts()).map(|l| l.time_s).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mission {
    pub spec: MissionSpec,
    laps: Vec<LapRecord>,
    complete: bool,
}

impl Mission {
    pub fn new(spec: MissionSpec) -> Self {
        Mission {
            spec,
            laps: Vec::new(),
            complete: false,
        }
    }

    pub fn laps(&self) -> &[LapRecord] {
        &self.laps
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn total_s(&self) -> Option<f64> {
        self.complete.then(|| mission_total(&self.laps))
    }

    /// Feeds one completed lap. Laps outside Driving, or after completion,
    /// are ignored.
    pub fn mission_tick(&mut self, state: AsState, lap_time_s: f64) -> MissionUpdate {
        if state != AsState::Driving || self.complete || !(lap_time_s.is_finite() && lap_time_s > 0.0) {
            return MissionUpdate::Ignored;
        }
        let lap = self.laps.len() as u32 + 1;
        let role = self.spec.format.role(lap);
        self.laps.push(LapRecord {
            lap,
            role,
            time_s: lap_time_s,
        });
        if lap >= self.spec.format.total_laps() {
            self.complete = true;
            return MissionUpdate::Complete {
                total_s: mission_total(&self.laps),
            };
        }
        MissionUpdate::Recorded(role)
    }

    pub fn status(&self) -> MissionStatus {
        MissionStatus {
            laps_done: self.laps.len() as u32,
            laps_total: self.spec.format.total_laps(),
            lap_times: self.laps.iter().map(|l| l.time_s).collect(),
            total_s: self.total_s(),
        }
    }
}
