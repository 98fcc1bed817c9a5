//! Latest-value telemetry assembled from bus traffic.

use std::collections::BTreeMap;

use racesup_core::bus::{topics, Frame};
use racesup_core::decision::Selection;
use racesup_core::model::{
    HealthReport, LapEvent, MarginUpdate, Payload, ScoreReport, StateChange, VehicleStateEstimate,
};
use serde::Serialize;

/// Bus patterns the aggregator listens to.
pub const PATTERNS: [&str; 7] = [
    topics::SUPERVISOR_STATE,
    topics::SUPERVISOR_MARGIN,
    topics::DECISION_SELECTED,
    topics::ESTIMATOR_STATE,
    topics::TELEMETRY_LAP,
    topics::TELEMETRY_SCORES,
    "pipeline/*/health",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PipelineTelemetry {
    pub health: Option<String>,
    pub score: Option<f64>,
    pub admissible: Option<bool>,
    pub gate_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlendTelemetry {
    pub from: Option<String>,
    pub to: String,
    pub t_elapsed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TelemetrySnapshot {
    /// Newest bus timestamp folded into this snapshot.
    pub timestamp_ns: u64,
    pub as_state: String,
    pub selected: Option<String>,
    pub reason: Option<String>,
    pub blend: Option<BlendTelemetry>,
    pub pipelines: BTreeMap<String, PipelineTelemetry>,
    pub pose: Option<Pose>,
    pub lap_times: Vec<f64>,
    pub margin: f64,
    pub degradation: f64,
}

impl Default for TelemetrySnapshot {
    fn default() -> Self {
        TelemetrySnapshot {
            timestamp_ns: 0,
            as_state: "Off".into(),
            selected: None,
            reason: None,
            blend: None,
            pipelines: BTreeMap::new(),
            pose: None,
            lap_times: Vec::new(),
            margin: 1.0,
            degradation: 1.0,
        }
    }
}

impl TelemetrySnapshot {
    /// Folds one bus frame in. Returns false for frames that do not decode
    /// or are not telemetry.
    pub fn apply(&mut self, f: &Frame) -> bool {
        let ok = match f.topic.as_str() {
            topics::SUPERVISOR_STATE => StateChange::from_payload(&f.payload)
                .map(|c| {
                    if c.to == racesup_core::model::AsState::Initializing {
                        self.lap_times.clear();
                    }
                    self.as_state = c.to.as_str().to_string();
                })
                .is_ok(),
            topics::SUPERVISOR_MARGIN => MarginUpdate::from_payload(&f.payload)
                .map(|m| {
                    self.margin = m.margin;
                    self.degradation = m.degradation;
                })
                .is_ok(),
            topics::DECISION_SELECTED => Selection::from_payload(&f.payload)
                .map(|s| {
                    self.selected = s.active.pipeline_id().map(str::to_string);
                    self.reason = Some(s.reason.as_str().to_string());
                    self.blend = s.blending.map(|b| BlendTelemetry {
                        from: b.from_id,
                        to: b.to_id,
                        t_elapsed: b.t_elapsed,
                    });
                })
                .is_ok(),
            topics::ESTIMATOR_STATE => VehicleStateEstimate::from_payload(&f.payload)
                .map(|e| {
                    self.pose = Some(Pose {
                        x: e.x,
                        y: e.y,
                        heading: e.heading,
                        speed: e.speed,
                    })
                })
                .is_ok(),
            topics::TELEMETRY_LAP => LapEvent::from_payload(&f.payload)
                .map(|l| self.lap_times.push(l.lap_time_s))
                .is_ok(),
            topics::TELEMETRY_SCORES => ScoreReport::from_payload(&f.payload)
                .map(|r| {
                    for e in r.entries {
                        let p = self.pipelines.entry(e.pipeline_id).or_default();
                        p.score = Some(e.score);
                        p.admissible = Some(e.admissible);
                        p.gate_reason = e.reason;
                    }
                })
                .is_ok(),
            t if t.starts_with("pipeline/") && t.ends_with("/health") => HealthReport::from_payload(&f.payload)
                .map(|h| {
                    self.pipelines.entry(h.pipeline_id).or_default().health = Some(h.status.as_str().to_string());
                })
                .is_ok(),
            _ => false,
        };
        if ok {
            self.timestamp_ns = self.timestamp_ns.max(f.timestamp_ns);
        }
        ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use racesup_core::model::{AsEvent, AsState, HealthStatus, PipelineScore};

    fn frame(topic: &str, payload: Vec<u8>, t: u64) -> Frame {
        Frame {
            flags: 0,
            topic: topic.into(),
            seq: 0,
            timestamp_ns: t,
            payload,
        }
    }

    #[test]
    fn folds_frames() {
        let mut s = TelemetrySnapshot::default();
        assert_eq!(s.as_state, "Off");
        let change = StateChange {
            from: AsState::Ready,
            to: AsState::Driving,
            event: AsEvent::MissionStart,
            timestamp_ns: 5,
        };
        assert!(s.apply(&frame(topics::SUPERVISOR_STATE, change.to_payload(), 5)));
        let h = HealthReport {
            pipeline_id: "classic".into(),
            status: HealthStatus::Healthy,
            heartbeat_age_ms: 1.0,
            proposal_rate_hz: 50.0,
            restart_count: 0,
        };
        assert!(s.apply(&frame("pipeline/classic/health", h.to_payload(), 7)));
        let r = ScoreReport {
            timestamp_ns: 6,
            entries: vec![PipelineScore {
                pipeline_id: "classic".into(),
                score: 0.9,
                admissible: true,
                reason: None,
            }],
        };
        assert!(s.apply(&frame(topics::TELEMETRY_SCORES, r.to_payload(), 6)));
        assert!(!s.apply(&frame(topics::TELEMETRY_SCORES, vec![0xFF], 9)));
        assert_eq!(s.as_state, "Driving");
        assert_eq!(s.timestamp_ns, 7);
        let p = &s.pipelines["classic"];
        assert_eq!(p.health.as_deref(), Some("Healthy"));
        assert_eq!(p.score, Some(0.9));
    }
}
