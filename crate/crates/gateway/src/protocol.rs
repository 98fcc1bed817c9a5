//! Text messages exchanged with gateway clients. Every message is one JSON
//! object with a `type` field.

use racesup_core::hmi::HmiMessage;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::telemetry::TelemetrySnapshot;

pub const DEFAULT_RATE_HZ: f64 = 10.0;
pub const MAX_RATE_HZ: f64 = 50.0;

/// Envelope fields accepted on any client message and stripped before the
/// body is validated.
const ENVELOPE: [&str; 3] = ["id", "client_id", "timestamp"];

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Hmi(HmiMessage),
    /// Session-local telemetry rate request, in Hz.
    SetTelemetryRate(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientMessage {
    /// Echoed in the reply.
    pub id: Option<Value>,
    pub client_id: Option<String>,
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub id: Option<Value>,
    pub reason: String,
}

pub fn parse_client(text: &str) -> Result<ClientMessage, Rejection> {
    let value: Value = serde_json::from_str(text).map_err(|e| Rejection {
        id: None,
        reason: format!("malformed message: {e}"),
    })?;
    let Value::Object(mut obj) = value else {
        return Err(Rejection {
            id: None,
            reason: "message must be an object".into(),
        });
    };
    let id = obj.remove("id");
    let reject = |reason: String| Rejection { id: id.clone(), reason };
    let client_id = match obj.remove("client_id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(reject("client_id must be a string".into())),
    };
    for k in ENVELOPE {
        obj.remove(k);
    }
    let ty = match obj.get("type") {
        Some(Value::String(t)) => t.clone(),
        Some(_) => return Err(reject("type must be a string".into())),
        None => return Err(reject("missing type".into())),
    };
    let body = if ty == "set_telemetry_rate" {
        parse_rate(&obj).map_err(reject)?
    } else {
        let m: HmiMessage = serde_json::from_value(Value::Object(obj)).map_err(|e| reject(e.to_string()))?;
        // Range checks live with the bus conversion.
        m.clone().into_kind().map_err(|e| reject(e.0))?;
        Body::Hmi(m)
    };
    Ok(ClientMessage { id, client_id, body })
}

fn parse_rate(obj: &Map<String, Value>) -> Result<Body, String> {
    if let Some(k) = obj.keys().find(|k| *k != "type" && *k != "rate_hz") {
        return Err(format!("unknown field `{k}`"));
    }
    let rate = obj
        .get("rate_hz")
        .and_then(Value::as_f64)
        .ok_or("rate_hz must be a number")?;
    if !(rate.is_finite() && rate > 0.0) {
        return Err(format!("rate_hz {rate} must be positive"));
    }
    Ok(Body::SetTelemetryRate(rate))
}

/// Messages sent to clients.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage<'a> {
    Ack {
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<Value>,
        command: &'a str,
    },
    Rejected {
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<Value>,
        reason: String,
    },
    TelemetryRate {
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<Value>,
        rate_hz: f64,
    },
    Telemetry(&'a TelemetrySnapshot),
}

impl ServerMessage<'_> {
    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

pub fn clamp_rate(rate: f64) -> f64 {
    rate.min(MAX_RATE_HZ)
}
