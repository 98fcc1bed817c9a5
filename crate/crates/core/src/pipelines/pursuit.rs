//! Pure-pursuit steering and a curvature-limited speed profile.

use serde::{Deserialize, Serialize};

use crate::model::{wrap_angle, VehicleStateEstimate};
use crate::sim::TrackModel;

use super::VehicleGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PursuitParams {
    /// Lookahead gain, s.
    pub k_v: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub a_lat_max: f64,
    pub v_cap: f64,
    pub kp_speed: f64,
}

impl Default for PursuitParams {
    fn default() -> Self {
        PursuitParams {
            k_v: 0.5,
            l_min: 1.0,
            l_max: 8.0,
            a_lat_max: 6.0,
            v_cap: 20.0,
            kp_speed: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PursuitError {
    #[error("invalid pursuit parameters: {0}")]
    Params(String),
    #[error("no reachable pursuit target")]
    NoTarget,
}

impl PursuitParams {
    pub fn validate(&self) -> Result<(), PursuitError> {
        if !(self.l_min > 0.0 && self.l_min <= self.l_max) {
            return Err(PursuitError::Params("need 0 < l_min <= l_max".into()));
        }
        if !(self.a_lat_max > 0.0 && self.v_cap > 0.0 && self.k_v >= 0.0 && self.kp_speed >= 0.0) {
            return Err(PursuitError::Params("gains and limits must be positive".into()));
        }
        Ok(())
    }
}

pub fn lookahead(speed: f64, p: &PursuitParams) -> f64 {
    (p.k_v * speed).clamp(p.l_min, p.l_max)
}

/// Path curvature that reaches a target at bearing `alpha` and distance `ld`.
pub fn pursuit_curvature(alpha: f64, ld: f64) -> f64 {
    2.0 * alpha.sin() / ld
}

/// Normalized steering for path curvature `kappa`.
pub fn steering_for_curvature(kappa: f64, geom: &VehicleGeometry) -> f64 {
    ((geom.wheelbase * kappa).atan() / geom.delta_max).clamp(-1.0, 1.0)
}

/// Bearing of `(tx, ty)` from the vehicle, measured clockwise from the
/// heading so that a target to the right is positive, matching the sign of
/// normalized steering.
pub fn bearing(est: &VehicleStateEstimate, tx: f64, ty: f64) -> f64 {
    -wrap_angle((ty - est.y).atan2(tx - est.x) - est.heading)
}

/// Steering toward the centerline point one lookahead ahead of the
/// vehicle's projection onto the track. Also returns the projected
/// arc-length.
pub fn pursuit_steering(
    est: &VehicleStateEstimate,
    track: &TrackModel,
    params: &PursuitParams,
    geom: &VehicleGeometry,
) -> Result<(f64, f64), PursuitError> {
    let prog = track.progress(est.x, est.y).map_err(|_| PursuitError::NoTarget)?;
    let ld = lookahead(est.speed, params);
    let target_s = prog.s + ld;
    if !track.closed && target_s > track.length() {
        return Err(PursuitError::NoTarget);
    }
    let (tx, ty) = track.point_at(target_s);
    if (tx - est.x).hypot(ty - est.y) < 1e-9 {
        return Err(PursuitError::NoTarget);
    }
    let alpha = bearing(est, tx, ty);
    let steering = steering_for_curvature(pursuit_curvature(alpha, ld), geom);
    Ok((steering, prog.s))
}

/// Preview distance for the curvature look-ahead.
pub fn preview_horizon(speed: f64) -> f64 {
    (2.0 * speed).clamp(5.0, 40.0)
}

/// `budget` is the product of safety margin and degradation factor.
pub fn speed_target(kappa_ahead: f64, params: &PursuitParams, budget: f64) -> f64 {
    params
        .v_cap
        .min((params.a_lat_max * budget / kappa_ahead.abs().max(1e-6)).sqrt())
}

pub fn speed_pedal(v_target: f64, speed: f64, params: &PursuitParams) -> f64 {
    (params.kp_speed * (v_target - speed)).clamp(-1.0, 1.0)
}
