use crate::model::{AsEvent, AsState};

/// Facts the guards consult.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GuardContext {
    pub required_units_running: bool,
    pub estimator_ready: bool,
    pub mission_loaded: bool,
    pub speed: f64,
}

pub const STATIONARY_SPEED: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guard {
    Always,
    UnitsAndEstimatorReady,
    MissionLoaded,
    Stationary,
}

impl Guard {
    pub fn holds(self, ctx: &GuardContext) -> bool {
        match self {
            Guard::Always => true,
            Guard::UnitsAndEstimatorReady => ctx.required_units_running && ctx.estimator_ready,
            Guard::MissionLoaded => ctx.mission_loaded,
            Guard::Stationary => ctx.speed.abs() < STATIONARY_SPEED,
        }
    }
}

use AsEvent as E;
use AsState as S;

pub const TABLE: &[(AsState, AsEvent, Guard, AsState)] = &[
    (S::Off, E::PowerOn, Guard::Always, S::Initializing),
    (S::Initializing, E::InitDone, Guard::UnitsAndEstimatorReady, S::Ready),
    (S::Ready, E::MissionStart, Guard::MissionLoaded, S::Driving),
    (S::Driving, E::MissionComplete, Guard::Always, S::Finished),
    (S::Driving, E::FaultDetected, Guard::Always, S::SafeStop),
    (S::SafeStop, E::StopComplete, Guard::Stationary, S::Ready),
    (S::Initializing, E::EStop, Guard::Always, S::Emergency),
    (S::Ready, E::EStop, Guard::Always, S::Emergency),
    (S::Driving, E::EStop, Guard::Always, S::Emergency),
    (S::SafeStop, E::EStop, Guard::Always, S::Emergency),
    (S::Emergency, E::EStop, Guard::Always, S::Emergency),
    (S::Finished, E::EStop, Guard::Always, S::Emergency),
    (S::Emergency, E::Reset, Guard::Stationary, S::Off),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Taken(AsState),
    NoEntry,
    GuardFailed(Guard),
}

pub fn lookup(state: AsState, event: AsEvent) -> Option<(Guard, AsState)> {
    TABLE
        .iter()
        .find(|(from, ev, _, _)| *from == state && *ev == event)
        .map(|(_, _, g, to)| (*g, *to))
}

pub fn handle_event(state: AsState, event: AsEvent, ctx: &GuardContext) -> Outcome {
    match lookup(state, event) {
        None => Outcome::NoEntry,
        Some((guard, to)) if guard.holds(ctx) => Outcome::Taken(to),
        Some((guard, _)) => Outcome::GuardFailed(guard),
    }
}
