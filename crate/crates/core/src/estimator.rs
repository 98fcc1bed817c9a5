//! Vehicle state estimator: fuses pose and wheel speed into one state
//! stream and dead-reckons through GPS dropouts.
//!
//! The filter is a decoupled recursive Gaussian filter over
//! (x, y, heading, speed, yaw rate): each component carries its own
//! variance, prediction inflates every variance, and each measurement
//! updates only the components it observes. Yaw rate is observed through
//! the commanded steering angle when a steering model is configured.

use serde::{Deserialize, Serialize};

use crate::model::{wrap_angle, PoseMeasurement, VehicleStateEstimate, WheelSpeed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringModel {
    pub wheelbase: f64,
    pub tau_steer: f64,
}

/// Noise figures are standard deviations; process noise is per √s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub q_pos: f64,
    pub q_heading: f64,
    pub q_speed: f64,
    pub q_yaw_rate: f64,
    pub r_pos: f64,
    pub r_heading: f64,
    pub r_speed: f64,
    pub r_yaw_rate: f64,
    pub dropout_staleness_ms: f64,
    pub publish_rate_hz: f64,
    pub steering: Option<SteeringModel>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            q_pos: 0.05,
            q_heading: 0.01,
            q_speed: 0.5,
            q_yaw_rate: 0.5,
            r_pos: 0.05,
            r_heading: 0.01,
            r_speed: 0.05,
            r_yaw_rate: 0.05,
            dropout_staleness_ms: 300.0,
            publish_rate_hz: 100.0,
            steering: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EstimatorError {
    #[error("estimator not initialized")]
    NotReady,
    #[error("measurement rejected: {0}")]
    Rejected(String),
    #[error("prediction step must be positive, got {0}")]
    InvalidDt(f64),
    #[error("invalid estimator config: {0}")]
    Config(String),
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let stds = [
            self.q_pos,
            self.q_heading,
            self.q_speed,
            self.q_yaw_rate,
            self.r_pos,
            self.r_heading,
            self.r_speed,
            self.r_yaw_rate,
        ];
        if !stds.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(EstimatorError::Config("noise stds must be finite and non-negative".into()));
        }
        if !(self.dropout_staleness_ms > 0.0 && self.publish_rate_hz > 0.0) {
            return Err(EstimatorError::Config("staleness and publish rate must be positive".into()));
        }
        if let Some(m) = self.steering {
            if !(m.wheelbase > 0.0 && m.tau_steer > 0.0) {
                return Err(EstimatorError::Config("steering model needs positive wheelbase and lag".into()));
            }
        }
        Ok(())
    }
}

const X: usize = 0;
const Y: usize = 1;
const H: usize = 2;
const V: usize = 3;
const W: usize = 4;

/// Variance assigned to speed before any wheel-speed measurement.
const UNKNOWN_SPEED_VAR: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct Estimator {
    cfg: EstimatorConfig,
    mean: [f64; 5],
    var: [f64; 5],
    initialized: bool,
    pending_speed: Option<f64>,
    now_ns: u64,
    last_pose_ns: Option<u64>,
    steer_cmd: f64,
    steer_est: f64,
    rejected: u64,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig) -> Result<Self, EstimatorError> {
        cfg.validate()?;
        Ok(Estimator {
            cfg,
            mean: [0.0; 5],
            var: [0.0; 5],
            initialized: false,
            pending_speed: None,
            now_ns: 0,
            last_pose_ns: None,
            steer_cmd: 0.0,
            steer_est: 0.0,
            rejected: 0,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn rejected_count(&self) -> u64 {
        self.rejected
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns
    }

    fn reject(&mut self, why: String) -> EstimatorError {
        self.rejected += 1;
        EstimatorError::Rejected(why)
    }

    /// Predicts forward to `t_ns` if it lies ahead of the filter clock.
    pub fn advance_to(&mut self, t_ns: u64) -> Result<(), EstimatorError> {
        if !self.initialized {
            self.now_ns = self.now_ns.max(t_ns);
            return Ok(());
        }
        if t_ns > self.now_ns {
            self.predict((t_ns - self.now_ns) as f64 / 1e9)?;
        }
        Ok(())
    }

    pub fn ingest_pose(&mut self, m: &PoseMeasurement) -> Result<(), EstimatorError> {
        if ![m.x, m.y, m.heading].iter().all(|v| v.is_finite()) {
            return Err(self.reject("non-finite pose".into()));
        }
        if !self.initialized {
            let r_pos = self.cfg.r_pos.powi(2);
            self.mean = [m.x, m.y, wrap_angle(m.heading), self.pending_speed.unwrap_or(0.0), 0.0];
            self.var = [
                r_pos,
                r_pos,
                self.cfg.r_heading.powi(2),
                if self.pending_speed.is_some() {
                    self.cfg.r_speed.powi(2)
                } else {
                    UNKNOWN_SPEED_VAR
                },
                self.cfg.r_yaw_rate.powi(2),
            ];
            self.initialized = true;
            self.now_ns = self.now_ns.max(m.timestamp_ns);
            self.last_pose_ns = Some(m.timestamp_ns);
            return Ok(());
        }
        self.advance_to(m.timestamp_ns)?;
        let r_pos = self.cfg.r_pos.powi(2);
        self.update(X, m.x, r_pos);
        self.update(Y, m.y, r_pos);
        let innov = wrap_angle(m.heading - self.mean[H]);
        self.update(H, self.mean[H] + innov, self.cfg.r_heading.powi(2));
        self.mean[H] = wrap_angle(self.mean[H]);
        self.last_pose_ns = Some(self.last_pose_ns.map_or(m.timestamp_ns, |t| t.max(m.timestamp_ns)));
        Ok(())
    }

    pub fn ingest_wheelspeed(&mut self, m: &WheelSpeed) -> Result<(), EstimatorError> {
        if !m.speed.is_finite() || m.speed < 0.0 {
            return Err(self.reject(format!("wheel speed {}", m.speed)));
        }
        if !self.initialized {
            self.pending_speed = Some(m.speed);
            return Ok(());
        }
        self.advance_to(m.timestamp_ns)?;
        self.update(V, m.speed, self.cfg.r_speed.powi(2));
        self.mean[V] = self.mean[V].max(0.0);
        Ok(())
    }

    /// Latest commanded road-wheel angle, feeding the yaw-rate observation.
    pub fn ingest_steer_command(&mut self, steer_angle_cmd: f64) {
        if steer_angle_cmd.is_finite() {
            self.steer_cmd = steer_angle_cmd;
        }
    }

    fn update(&mut self, i: usize, z: f64, r: f64) {
        let p = self.var[i];
        if p + r <= 0.0 {
            self.mean[i] = z;
            return;
        }
        let k = p / (p + r);
        self.mean[i] += k * (z - self.mean[i]);
        self.var[i] = (1.0 - k) * p;
    }

    /// Constant speed, constant heading-rate motion over `dt` seconds.
    pub fn predict(&mut self, dt: f64) -> Result<(), EstimatorError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(EstimatorError::InvalidDt(dt));
        }
        if !self.initialized {
            return Err(EstimatorError::NotReady);
        }
        let [x, y, h, v, w] = self.mean;
        let (nx, ny) = if w.abs() < 1e-9 {
            (x + v * h.cos() * dt, y + v * h.sin() * dt)
        } else {
            let h1 = h + w * dt;
            (x + v / w * (h1.sin() - h.sin()), y - v / w * (h1.cos() - h.cos()))
        };
        self.mean = [nx, ny, wrap_angle(h + w * dt), v, w];

        let c = &self.cfg;
        let var = self.var;
        self.var[X] += c.q_pos.powi(2) * dt + dt * dt * (var[V] + v * v * var[H]);
        self.var[Y] += c.q_pos.powi(2) * dt + dt * dt * (var[V] + v * v * var[H]);
        self.var[H] += c.q_heading.powi(2) * dt + dt * dt * var[W];
        self.var[V] += c.q_speed.powi(2) * dt;
        self.var[W] += c.q_yaw_rate.powi(2) * dt;
        self.now_ns += (dt * 1e9).round() as u64;

        if let Some(m) = c.steering {
            self.steer_est += (self.steer_cmd - self.steer_est) * (1.0 - (-dt / m.tau_steer).exp());
            let w_obs = self.mean[V] * self.steer_est.tan() / m.wheelbase;
            self.update(W, w_obs, c.r_yaw_rate.powi(2));
        }
        Ok(())
    }

    pub fn gps_valid(&self) -> bool {
        gps_valid(self.now_ns, self.last_pose_ns, self.cfg.dropout_staleness_ms)
    }

    pub fn state(&self) -> Result<VehicleStateEstimate, EstimatorError> {
        if !self.initialized {
            return Err(EstimatorError::NotReady);
        }
        Ok(VehicleStateEstimate {
            x: self.mean[X],
            y: self.mean[Y],
            heading: self.mean[H],
            speed: self.mean[V].max(0.0),
            yaw_rate: self.mean[W],
            cov_diag: [self.var[X], self.var[Y], self.var[H], self.var[V]],
            gps_valid: self.gps_valid(),
            timestamp_ns: self.now_ns,
        })
    }

    pub fn yaw_rate_variance(&self) -> f64 {
        self.var[W]
    }
}

/// GPS is valid while the last pose is no older than the staleness budget.
pub fn gps_valid(now_ns: u64, last_pose_ns: Option<u64>, staleness_ms: f64) -> bool {
    match last_pose_ns {
        None => false,
        Some(t) => (now_ns.saturating_sub(t) as f64) / 1e6 <= staleness_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::ActuatorSetpoints;
    use crate::sim::{circle, FaultSchedule, Simulator, VehicleParams};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn pose(x: f64, y: f64, h: f64, t_ms: u64) -> PoseMeasurement {
        PoseMeasurement {
            x,
            y,
            heading: h,
            timestamp_ns: t_ms * 1_000_000,
        }
    }

    fn moving(speed: f64) -> Estimator {
        let mut e = Estimator::new(EstimatorConfig::default()).unwrap();
        e.ingest_wheelspeed(&WheelSpeed {
            speed,
            timestamp_ns: 0,
        })
        .unwrap();
        e.ingest_pose(&pose(0.0, 0.0, 0.0, 0)).unwrap();
        e
    }

    #[test]
    fn not_ready_before_first_pose() {
        let e = Estimator::new(EstimatorConfig::default()).unwrap();
        assert_eq!(e.state(), Err(EstimatorError::NotReady));
    }

    #[test]
    fn first_pose_initializes() {
        let mut e = Estimator::new(EstimatorConfig::default()).unwrap();
        e.ingest_pose(&pose(4.0, 5.0, 0.3, 10)).unwrap();
        let s = e.state().unwrap();
        assert_eq!((s.x, s.y, s.heading), (4.0, 5.0, 0.3));
        assert!((s.cov_diag[0] - 0.05f64.powi(2)).abs() < 1e-15);
        assert!(s.gps_valid);
    }

    #[test]
    fn rejects_bad_measurements() {
        let mut e = moving(5.0);
        let before = e.state().unwrap();
        assert!(e.ingest_pose(&pose(f64::NAN, 0.0, 0.0, 0)).is_err());
        assert!(e
            .ingest_wheelspeed(&WheelSpeed {
                speed: -1.0,
                timestamp_ns: 0
            })
            .is_err());
        assert_eq!(e.state().unwrap(), before);
        assert_eq!(e.rejected_count(), 2);
    }

    #[test]
    fn predict_closed_form() {
        let mut e = moving(10.0);
        let v0 = e.state().unwrap().cov_diag;
        e.predict(2.0).unwrap();
        let s = e.state().unwrap();
        assert!((s.x - 20.0).abs() < 1e-9, "x {}", s.x);
        assert!(s.y.abs() < 1e-12);
        for i in 0..4 {
            assert!(s.cov_diag[i] > v0[i]);
        }
        // hand evaluation of the variance growth rule for x
        let c = EstimatorConfig::default();
        let expect = v0[0] + c.q_pos.powi(2) * 2.0 + 4.0 * (v0[3] + 100.0 * v0[2]);
        assert!((s.cov_diag[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn many_small_steps_match_one_large() {
        let mut a = moving(10.0);
        let mut b = moving(10.0);
        for _ in 0..200 {
            a.predict(0.01).unwrap();
        }
        b.predict(2.0).unwrap();
        let (sa, sb) = (a.state().unwrap(), b.state().unwrap());
        assert!((sa.x - sb.x).abs() < 1e-9 && (sa.y - sb.y).abs() < 1e-9);
    }

    #[test]
    fn stationary_grows_covariance_only() {
        let mut e = moving(0.0);
        let s0 = e.state().unwrap();
        e.predict(1.0).unwrap();
        let s1 = e.state().unwrap();
        assert_eq!((s0.x, s0.y, s0.heading), (s1.x, s1.y, s1.heading));
        assert!(s1.cov_diag.iter().zip(&s0.cov_diag).all(|(a, b)| a > b));
    }

    #[test]
    fn gps_staleness() {
        let mut e = moving(0.0);
        assert!(e.state().unwrap().gps_valid);
        e.predict(0.4).unwrap();
        assert!(!e.state().unwrap().gps_valid);
        assert!(gps_valid(300_000_000, Some(0), 300.0));
        assert!(!gps_valid(300_000_001, Some(0), 300.0));
        assert!(!gps_valid(0, None, 300.0));
    }

    #[test]
    fn speed_converges() {
        let mut e = moving(0.0);
        for i in 1..=200u64 {
            e.ingest_wheelspeed(&WheelSpeed {
                speed: 10.0,
                timestamp_ns: i * 10_000_000,
            })
            .unwrap();
        }
        assert!((e.state().unwrap().speed - 10.0).abs() < 0.1);
    }

    #[test]
    fn speed_variance_grows_without_wheel_speed() {
        let mut e = moving(3.0);
        let mut prev = e.state().unwrap().cov_diag[3];
        for _ in 0..50 {
            e.predict(0.01).unwrap();
            let v = e.state().unwrap().cov_diag[3];
            assert!(v > prev);
            prev = v;
        }
    }

    /// Drives the simulator around a circle and feeds noiseless sensors.
    fn track_circle(dropout: Option<(f64, f64)>) -> (Vec<f64>, Vec<[f64; 4]>, Vec<f64>) {
        let params = VehicleParams::default();
        let track = Arc::new(circle(30.0, 256, 4.0));
        let faults = match dropout {
            None => FaultSchedule::default(),
            Some((a, b)) => FaultSchedule::periodic_gps_dropouts(a, 1e9, b - a, a + 1.0),
        };
        let mut sim = Simulator::new(params, track, faults, 0.005, 3).unwrap();
        let mut est = Estimator::new(EstimatorConfig {
            steering: Some(SteeringModel {
                wheelbase: params.wheelbase,
                tau_steer: params.tau_steer,
            }),
            ..Default::default()
        })
        .unwrap();
        let delta = (params.wheelbase / 30.0).atan();
        let (mut errs, mut covs, mut times) = (Vec::new(), Vec::new(), Vec::new());
        for k in 1..=2400u64 {
            let act = ActuatorSetpoints {
                steer_angle_cmd: delta,
                throttle: if sim.state().speed < 10.0 { 0.6 } else { 0.02 },
                brake: 0.0,
            };
            sim.step(&act).unwrap();
            est.ingest_steer_command(delta);
            // sensors at 100 Hz
            if k % 2 == 0 {
                let m = sim.sense();
                est.advance_to(sim.t_ns()).unwrap();
                est.ingest_wheelspeed(&m.wheel).unwrap();
                if let Some(p) = m.pose {
                    est.ingest_pose(&p).unwrap();
                }
                if let Ok(s) = est.state() {
                    let t = sim.state();
                    errs.push((s.x - t.x).hypot(s.y - t.y));
                    covs.push(s.cov_diag);
                    times.push(sim.t_ns() as f64 / 1e9);
                }
            }
        }
        (errs, covs, times)
    }

    #[test]
    fn converges_to_truth_with_noiseless_sensors() {
        let (errs, _, times) = track_circle(None);
        for (e, t) in errs.iter().zip(&times) {
            if *t > 1.0 {
                assert!(*e < 0.05, "error {e} at t {t}");
            }
        }
    }

    #[test]
    fn dead_reckons_through_dropout() {
        let (errs, covs, times) = track_circle(Some((6.0, 8.0)));
        let inside: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= 6.0 && times[i] < 8.0).collect();
        assert!(inside.len() > 150);
        for w in inside.windows(2) {
            for c in [0, 1, 2] {
                assert!(covs[w[1]][c] >= covs[w[0]][c]);
            }
        }
        let worst = inside.iter().map(|&i| errs[i]).fold(0.0, f64::max);
        assert!(worst < 1.0, "dead-reckoning error {worst}");
    }

    proptest! {
        #[test]
        fn heading_always_wrapped(h in -20.0f64..20.0, w in -3.0f64..3.0, dt in 0.001f64..5.0) {
            let mut e = moving(5.0);
            e.ingest_pose(&pose(0.0, 0.0, h, 0)).unwrap();
            e.mean[W] = w;
            e.predict(dt).unwrap();
            let s = e.state().unwrap();
            prop_assert!(s.heading > -std::f64::consts::PI && s.heading <= std::f64::consts::PI);
        }

        #[test]
        fn variance_monotone_without_measurements(steps in prop::collection::vec(0.001f64..0.5, 1..50)) {
            let mut e = moving(7.0);
            let mut prev = e.state().unwrap().cov_diag;
            for dt in steps {
                e.predict(dt).unwrap();
                let cur = e.state().unwrap().cov_diag;
                for i in 0..4 {
                    prop_assert!(cur[i] >= prev[i]);
                }
                prev = cur;
            }
        }

        #[test]
        fn pose_update_never_increases_variance(x in -50.0f64..50.0, y in -50.0f64..50.0, h in -3.0f64..3.0) {
            let mut e = moving(7.0);
            e.predict(0.5).unwrap();
            let before = e.state().unwrap().cov_diag;
            e.ingest_pose(&pose(x, y, h, 500)).unwrap();
            let after = e.state().unwrap().cov_diag;
            for i in 0..3 {
                prop_assert!(after[i] <= before[i]);
            }
        }
    }
}
