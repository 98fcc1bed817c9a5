use serde::{Deserialize, Serialize};

use crate::adapter::ActuatorSetpoints;
use crate::model::wrap_angle;

use super::SimError;

/// Kinematic bicycle parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// Wheelbase, m.
    pub wheelbase: f64,
    /// Steering lock, rad.
    pub delta_max: f64,
    /// Acceleration at full throttle, m/s².
    pub a_max: f64,
    /// Deceleration at full brake, m/s².
    pub b_max: f64,
    /// Rolling deceleration, m/s².
    pub c_roll: f64,
    /// First-order steering lag, s.
    pub tau_steer: f64,
    pub v_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            wheelbase: 2.9,
            delta_max: 0.35,
            a_max: 5.0,
            b_max: 10.0,
            c_roll: 0.1,
            tau_steer: 0.1,
            v_max: 40.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let all = [
            self.wheelbase,
            self.delta_max,
            self.a_max,
            self.b_max,
            self.c_roll,
            self.tau_steer,
            self.v_max,
        ];
        if !all.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(SimError::InvalidParams("all vehicle parameters must be positive".into()));
        }
        if self.delta_max >= std::f64::consts::FRAC_PI_2 {
            return Err(SimError::InvalidParams("delta_max must be below pi/2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    /// Actual road-wheel angle after the actuator lag; positive turns left.
    pub steer_angle: f64,
    pub t: f64,
}

pub const MAX_DT: f64 = 0.01;

/// One explicit-Euler step of the kinematic bicycle with first-order
/// steering lag.
pub fn step(
    state: &SimState,
    act: &ActuatorSetpoints,
    params: &VehicleParams,
    dt: f64,
) -> Result<SimState, SimError> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(SimError::InvalidStep(format!("dt {dt} outside (0, {MAX_DT}]")));
    }
    let inputs = [
        state.x,
        state.y,
        state.heading,
        state.speed,
        state.steer_angle,
        state.t,
        act.steer_angle_cmd,
        act.throttle,
        act.brake,
    ];
    if !inputs.iter().all(|v| v.is_finite()) {
        return Err(SimError::NonFinite);
    }
    if act.steer_angle_cmd.abs() > params.delta_max + 1e-12
        || !(0.0..=1.0).contains(&act.throttle)
        || !(0.0..=1.0).contains(&act.brake)
    {
        return Err(SimError::InvalidStep(format!("actuation outside limits: {act:?}")));
    }

    let steer = (state.steer_angle
        + (act.steer_angle_cmd - state.steer_angle) * dt / params.tau_steer)
        .clamp(-params.delta_max, params.delta_max);
    let heading_old = state.heading;
    let heading = wrap_angle(heading_old + state.speed * steer.tan() / params.wheelbase * dt);
    let x = state.x + state.speed * heading_old.cos() * dt;
    let y = state.y + state.speed * heading_old.sin() * dt;
    let accel = act.throttle * params.a_max - act.brake * params.b_max - params.c_roll;
    let speed = (state.speed + accel * dt).clamp(0.0, params.v_max);
    Ok(SimState {
        x,
        y,
        heading,
        speed,
        steer_angle: steer,
        t: state.t + dt,
    })
}
