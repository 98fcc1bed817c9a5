//! Supervisory core: AS state machine, mission planner, safety margin,
//! resource monitor, and the session logger.

mod logger;
mod margin;
mod mission;
mod resource;
mod state_machine;

use crate::bus::{topics, Node};
use crate::model::codec::Payload;
use crate::model::{AsEvent, AsState, MarginUpdate, StateChange, SupervisorNotice};

pub use logger::{parse_log, read_log, replay, LogContents, LogError, LogHeader, LogWriter, Logger, ReplayReport, LOG_MAGIC, LOG_VERSION};
pub use margin::{set_margin, MarginSource, MarginState, NonFiniteMargin, MARGIN_MAX, MARGIN_MIN};
pub use mission::{mission_total, LapRecord, LapRole, Mission, MissionFormat, MissionSpec, MissionUpdate};
pub use resource::{breaches, ResourceCeilings, ResourceMonitor, ResourceSample};
pub use state_machine::{handle_event, lookup, Guard, GuardContext, Outcome, STATIONARY_SPEED, TABLE};

/// Owns the AS state, mission and margin, and publishes their changes.
pub struct Supervisor {
    state: AsState,
    mission: Option<Mission>,
    margin: MarginState,
    node: Option<Node>,
    history: Vec<StateChange>,
    rejected: u64,
}

impl Supervisor {
    pub fn new(node: Option<Node>) -> Self {
        Supervisor {
            state: AsState::Off,
            mission: None,
            margin: MarginState::default(),
            node,
            history: Vec::new(),
            rejected: 0,
        }
    }

    pub fn state(&self) -> AsState {
        self.state
    }

    pub fn history(&self) -> &[StateChange] {
        &self.history
    }

    pub fn rejected_count(&self) -> u64 {
        self.rejected
    }

    pub fn load_mission(&mut self, spec: MissionSpec) {
        self.mission = Some(Mission::new(spec));
    }

    pub fn mission(&self) -> Option<&Mission> {
        self.mission.as_ref()
    }

    pub fn margin(&self) -> MarginState {
        self.margin
    }

    fn publish(&self, topic: &str, payload: Vec<u8>) {
        if let Some(n) = &self.node {
            if let Err(e) = n.publish(topic, payload) {
                log::warn!("supervisor publish on {topic}: {e}");
            }
        }
    }

    /// Applies an event. Taken transitions go out on `supervisor/state`,
    /// rejections on `supervisor/event`.
    pub fn handle_event(&mut self, event: AsEvent, mut ctx: GuardContext, now_ns: u64) -> Outcome {
        ctx.mission_loaded &= self.mission.is_some();
        let out = handle_event(self.state, event, &ctx);
        match out {
            Outcome::Taken(to) => {
                let change = StateChange {
                    from: self.state,
                    to,
                    event,
                    timestamp_ns: now_ns,
                };
                log::info!("AS state {} -> {} on {}", self.state.as_str(), to.as_str(), event.as_str());
                self.state = to;
                self.history.push(change);
                self.publish(topics::SUPERVISOR_STATE, change.to_payload());
            }
            Outcome::NoEntry | Outcome::GuardFailed(_) => {
                self.rejected += 1;
                log::debug!("rejected {} in {} ({out:?})", event.as_str(), self.state.as_str());
                let notice = SupervisorNotice::TransitionRejected {
                    state: self.state,
                    event,
                };
                self.publish(topics::SUPERVISOR_EVENT, notice.to_payload());
            }
        }
        out
    }

    pub fn set_margin(&mut self, request: f64, source: MarginSource) -> Result<MarginState, NonFiniteMargin> {
        self.margin = set_margin(request, source)?;
        Ok(self.margin)
    }

    /// Broadcasts the effective margin; pipelines use it as their clock.
    pub fn publish_margin(&self, degradation: f64, now_ns: u64) {
        let m = MarginUpdate {
            margin: self.margin.effective,
            degradation,
            timestamp_ns: now_ns,
        };
        self.publish(topics::SUPERVISOR_MARGIN, m.to_payload());
    }

    /// Feeds a completed lap to the mission; publishes progress and raises
    /// MissionComplete when the schedule is done.
    pub fn on_lap(&mut self, lap_time_s: f64, ctx: GuardContext, now_ns: u64) -> MissionUpdate {
        let state = self.state;
        let Some(m) = self.mission.as_mut() else {
            return MissionUpdate::Ignored;
        };
        let update = m.mission_tick(state, lap_time_s);
        if update != MissionUpdate::Ignored {
            let status = m.status();
            self.publish(topics::SUPERVISOR_MISSION, status.to_payload());
        }
        if let MissionUpdate::Complete { .. } = update {
            self.handle_event(AsEvent::MissionComplete, ctx, now_ns);
        }
        update
    }

    pub fn notice(&self, notice: SupervisorNotice) {
        self.publish(topics::SUPERVISOR_EVENT, notice.to_payload());
    }
}
