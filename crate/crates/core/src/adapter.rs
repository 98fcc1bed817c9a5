//! Vehicle adapter: normalized command to vehicle-specific actuator setpoints.

use serde::{Deserialize, Serialize};

use crate::model::codec::{CodecError, Payload, Reader, Writer};
use crate::model::{tags, validate_command, CommandError, NormalizedCommand};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActuatorSetpoints {
    pub steer_angle_cmd: f64,
    pub throttle: f64,
    pub brake: f64,
}

impl Payload for ActuatorSetpoints {
    const TAG: u8 = tags::ACTUATION;
    fn write_body(&self, w: &mut Writer) {
        w.f64(self.steer_angle_cmd);
        w.f64(self.throttle);
        w.f64(self.brake);
    }
    fn read_body(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ActuatorSetpoints {
            steer_angle_cmd: r.f64()?,
            throttle: r.f64()?,
            brake: r.f64()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterProfile {
    pub delta_max: f64,
    /// +1 maps normalized steering straight onto the road-wheel angle; −1
    /// flips it for vehicles whose angle is positive to the left.
    pub steer_sign: f64,
    pub deadband: f64,
    pub output_rate_hz: f64,
}

impl Default for AdapterProfile {
    fn default() -> Self {
        AdapterProfile {
            delta_max: 0.35,
            steer_sign: 1.0,
            deadband: 0.02,
            output_rate_hz: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdapterError {
    #[error("invalid adapter profile: {0}")]
    Profile(String),
    #[error(transparent)]
    Command(#[from] CommandError),
}

impl AdapterProfile {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if !(self.delta_max.is_finite() && self.delta_max > 0.0) {
            return Err(AdapterError::Profile("delta_max must be positive".into()));
        }
        if self.steer_sign != 1.0 && self.steer_sign != -1.0 {
            return Err(AdapterError::Profile("steer_sign must be 1 or -1".into()));
        }
        if !(0.0..=0.1).contains(&self.deadband) {
            return Err(AdapterError::Profile("deadband must lie in [0, 0.1]".into()));
        }
        if !(self.output_rate_hz.is_finite() && self.output_rate_hz > 0.0) {
            return Err(AdapterError::Profile("output_rate_hz must be positive".into()));
        }
        Ok(())
    }
}

pub fn to_actuation(cmd: NormalizedCommand, profile: &AdapterProfile) -> Result<ActuatorSetpoints, AdapterError> {
    let cmd = validate_command(cmd)?;
    let steer_angle_cmd = profile.steer_sign * cmd.steering * profile.delta_max;
    let (throttle, brake) = if cmd.pedal > profile.deadband {
        (cmd.pedal, 0.0)
    } else if cmd.pedal < -profile.deadband {
        (0.0, -cmd.pedal)
    } else {
        (0.0, 0.0)
    };
    Ok(ActuatorSetpoints {
        steer_angle_cmd,
        throttle,
        brake,
    })
}

/// Inverse of [`to_actuation`] outside the deadband.
pub fn to_normalized(act: &ActuatorSetpoints, profile: &AdapterProfile) -> NormalizedCommand {
    NormalizedCommand::new(
        profile.steer_sign * act.steer_angle_cmd / profile.delta_max,
        act.throttle - act.brake,
        0,
    )
}

pub const WATCHDOG_THRESHOLD_MS: f64 = 200.0;
pub const WATCHDOG_RAMP_MS: f64 = 1000.0;

/// Brake override once no selection has arrived for longer than the
/// threshold. The brake ramps from 0 at the threshold to 1 a second later.
pub fn watchdog_tick(last_selection_age_ms: f64, held_steer: f64) -> Option<ActuatorSetpoints> {
    if last_selection_age_ms <= WATCHDOG_THRESHOLD_MS {
        return None;
    }
    let brake = ((last_selection_age_ms - WATCHDOG_THRESHOLD_MS) / WATCHDOG_RAMP_MS).clamp(0.0, 1.0);
    Some(ActuatorSetpoints {
        steer_angle_cmd: held_steer,
        throttle: 0.0,
        brake,
    })
}

/// Stateful adapter: holds the last good setpoints and tracks watchdog
/// engagement.
#[derive(Debug, Clone)]
pub struct VehicleAdapter {
    profile: AdapterProfile,
    last_good: ActuatorSetpoints,
    last_selection_ns: Option<u64>,
    fault_count: u64,
    watchdog_engaged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterOutput {
    pub setpoints: ActuatorSetpoints,
    /// True on the tick the watchdog first engages.
    pub raise_fault: bool,
}

impl VehicleAdapter {
    pub fn new(profile: AdapterProfile) -> Result<Self, AdapterError> {
        profile.validate()?;
        Ok(VehicleAdapter {
            profile,
            last_good: ActuatorSetpoints::default(),
            last_selection_ns: None,
            fault_count: 0,
            watchdog_engaged: false,
        })
    }

    pub fn profile(&self) -> &AdapterProfile {
        &self.profile
    }

    pub fn fault_count(&self) -> u64 {
        self.fault_count
    }

    pub fn last_good(&self) -> ActuatorSetpoints {
        self.last_good
    }

    /// Applies a selected command received at `now_ns`. Invalid commands
    /// keep the previous setpoints.
    pub fn on_selection(&mut self, cmd: NormalizedCommand, now_ns: u64) -> ActuatorSetpoints {
        self.last_selection_ns = Some(now_ns);
        self.watchdog_engaged = false;
        match to_actuation(cmd, &self.profile) {
            Ok(a) => self.last_good = a,
            Err(e) => {
                self.fault_count += 1;
                log::warn!("adapter rejected command: {e}");
            }
        }
        self.last_good
    }

    /// Output at `now_ns`, with the watchdog override applied when the
    /// selection stream has gone quiet.
    pub fn tick(&mut self, now_ns: u64) -> AdapterOutput {
        let Some(last) = self.last_selection_ns else {
            return AdapterOutput {
                setpoints: self.last_good,
                raise_fault: false,
            };
        };
        let age_ms = now_ns.saturating_sub(last) as f64 / 1e6;
        match watchdog_tick(age_ms, self.last_good.steer_angle_cmd) {
            None => AdapterOutput {
                setpoints: self.last_good,
                raise_fault: false,
            },
            Some(sp) => {
                let raise_fault = !self.watchdog_engaged;
                self.watchdog_engaged = true;
                AdapterOutput {
                    setpoints: sp,
                    raise_fault,
                }
            }
        }
    }
}
