//! Structured form of operator commands, shared by the gateway's text
//! protocol and scenario files.

use serde::{Deserialize, Serialize};

use crate::model::HmiCommandKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum HmiMessage {
    SetSafetyMargin {
        value: f64,
    },
    SetPriority {
        pipeline_id: String,
        priority: f64,
    },
    SelectPipeline {
        #[serde(default)]
        pipeline_id: Option<String>,
    },
    TeleopAxes {
        steering: f64,
        pedal: f64,
    },
    Estop {},
    MissionStart {},
    Reset {},
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct HmiRejection(pub String);

impl HmiMessage {
    /// Validates ranges and converts to the bus form. Margins are only
    /// required to be finite; clamping is the supervisor's job.
    pub fn into_kind(self) -> Result<HmiCommandKind, HmiRejection> {
        let reject = |s: String| Err(HmiRejection(s));
        Ok(match self {
            HmiMessage::SetSafetyMargin { value } => {
                if !value.is_finite() {
                    return reject("margin must be finite".into());
                }
                HmiCommandKind::SetSafetyMargin { value }
            }
            HmiMessage::SetPriority { pipeline_id, priority } => {
                if pipeline_id.is_empty() {
                    return reject("empty pipeline_id".into());
                }
                if !(priority.is_finite() && priority >= 0.0) {
                    return reject(format!("priority {priority} must be finite and non-negative"));
                }
                HmiCommandKind::SetPriority { pipeline_id, priority }
            }
            HmiMessage::SelectPipeline { pipeline_id } => {
                if pipeline_id.as_deref() == Some("") {
                    return reject("empty pipeline_id".into());
                }
                HmiCommandKind::SelectPipeline { pipeline_id }
            }
            HmiMessage::TeleopAxes { steering, pedal } => {
                for (name, v) in [("steering", steering), ("pedal", pedal)] {
                    if !(v.is_finite() && (-1.0..=1.0).contains(&v)) {
                        return reject(format!("{name} {v} outside [-1, 1]"));
                    }
                }
                HmiCommandKind::TeleopAxes { steering, pedal }
            }
            HmiMessage::Estop {} => HmiCommandKind::Estop,
            HmiMessage::MissionStart {} => HmiCommandKind::MissionStart,
            HmiMessage::Reset {} => HmiCommandKind::Reset,
        })
    }

    pub fn from_kind(kind: &HmiCommandKind) -> Self {
        match kind.clone() {
            HmiCommandKind::SetSafetyMargin { value } => HmiMessage::SetSafetyMargin { value },
            HmiCommandKind::SetPriority { pipeline_id, priority } => HmiMessage::SetPriority { pipeline_id, priority },
            HmiCommandKind::SelectPipeline { pipeline_id } => HmiMessage::SelectPipeline { pipeline_id },
            HmiCommandKind::TeleopAxes { steering, pedal } => HmiMessage::TeleopAxes { steering, pedal },
            HmiCommandKind::Estop => HmiMessage::Estop {},
            HmiCommandKind::MissionStart => HmiMessage::MissionStart {},
            HmiCommandKind::Reset => HmiMessage::Reset {},
        }
    }
}
