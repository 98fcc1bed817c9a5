use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterProfile;
use crate::decision::{ArbitrationConfig, DegradationState};
use crate::estimator::{EstimatorConfig, SteeringModel};
use crate::handlers::{HealthPolicy, RestartPolicy};
use crate::hmi::HmiMessage;
use crate::pipelines::{PipelineConfig, PipelineKind, PursuitParams, StochasticParams, TeleopParams, VehicleGeometry};
use crate::sim::{FaultEntry, FaultSchedule, VehicleParams};
use crate::supervisor::{MissionFormat, ResourceCeilings};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("asset {0:?} not found")]
    MissingAsset(String),
}

/// Directory holding shipped scenarios and tracks: `RACE_SUP_ASSETS` if set,
/// otherwise the repository's `scenarios/` directory.
pub fn assets_dir() -> PathBuf {
    match std::env::var_os("RACE_SUP_ASSETS") {
        Some(p) => PathBuf::from(p),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    #[default]
    Filter,
    /// Forwards the last raw pose with its own timestamp and the wheel speed.
    Passthrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub mode: EstimatorMode,
    /// Feed commanded steering into the yaw-rate observation, using the
    /// scenario's vehicle geometry.
    pub steering_feedback: bool,
    pub config: EstimatorConfig,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        EstimatorSection {
            mode: EstimatorMode::Filter,
            steering_feedback: true,
            config: EstimatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodicDropouts {
    pub first_s: f64,
    pub period_s: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultsSection {
    pub gps_dropouts: Option<PeriodicDropouts>,
    pub entries: Vec<FaultEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaunchMode {
    /// A process when a pipeline executable is available, else a thread.
    #[default]
    Auto,
    Process,
    Thread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineEntry {
    pub id: String,
    pub kind: PipelineKind,
    #[serde(default = "one")]
    pub priority: f64,
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub launch: LaunchMode,
    #[serde(default)]
    pub restart: RestartPolicy,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub tick_rate_hz: Option<f64>,
    #[serde(default)]
    pub pursuit: PursuitParams,
    #[serde(default)]
    pub stochastic: StochasticParams,
    #[serde(default)]
    pub teleop: TeleopParams,
}

/// Contents of a shared pipeline-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSet {
    pub pipelines: Vec<PipelineEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledEvent {
    pub at_s: f64,
    /// Pipeline to kill.
    #[serde(default)]
    pub kill: Option<String>,
    /// Command injected on `hmi/command`.
    #[serde(default)]
    pub hmi: Option<HmiMessage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PassCriteria {
    pub max_lap_time_s: Option<f64>,
    pub max_lateral_deviation_m: Option<f64>,
    pub max_off_track_steps: Option<u64>,
    /// The run must include a change of active pipeline forced by a health
    /// failure.
    pub require_failover: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_max_sim_s")]
    pub max_sim_s: f64,
    /// Real-time pacing factor; 0 runs as fast as possible.
    #[serde(default)]
    pub pace: f64,
    pub track: String,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub adapter: AdapterProfile,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub arbitration: ArbitrationConfig,
    pub mission: MissionFormat,
    #[serde(default)]
    pub degradation: DegradationState,
    #[serde(default = "one")]
    pub margin: f64,
    #[serde(default)]
    pub faults: FaultsSection,
    #[serde(default)]
    pub health: HealthPolicy,
    #[serde(default)]
    pub resources: ResourceCeilings,
    /// Shared pipeline-set file, used when `pipelines` is empty.
    #[serde(default)]
    pub pipeline_set: Option<String>,
    #[serde(default)]
    pub pipelines: Vec<PipelineEntry>,
    /// Per-scenario priority overrides, by pipeline id.
    #[serde(default)]
    pub priorities: BTreeMap<String, f64>,
    #[serde(default)]
    pub disabled: Vec<String>,
    #[serde(default)]
    pub events: Vec<ScheduledEvent>,
    /// Wait for an HMI mission_start instead of starting automatically.
    #[serde(default)]
    pub wait_for_mission_start: bool,
    /// After a completed safe stop, restart the mission instead of ending.
    #[serde(default)]
    pub resume_after_safe_stop: bool,
    #[serde(default)]
    pub criteria: PassCriteria,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Seeds stay within the signed 64-bit range of the config file format.
pub const MAX_SEED: u64 = i64::MAX as u64;

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_dt() -> f64 {
    0.005
}
fn default_max_sim_s() -> f64 {
    600.0
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| match e {
            ScenarioError::Parse { msg, .. } => ScenarioError::Parse {
                path: path.to_path_buf(),
                msg,
            },
            e => e,
        })
    }

    /// Parses and validates; relative paths resolve against `base_dir`, then
    /// the assets directory.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        let mut s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            path: PathBuf::from("<scenario>"),
            msg: e.to_string(),
        })?;
        s.base_dir = base_dir.to_path_buf();
        if s.pipelines.is_empty() {
            if let Some(set) = &s.pipeline_set {
                let path = s.resolve(set)?;
                let text = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io {
                    path: path.clone(),
                    source,
                })?;
                let set: PipelineSet = toml::from_str(&text).map_err(|e| ScenarioError::Parse {
                    path,
                    msg: e.to_string(),
                })?;
                s.pipelines = set.pipelines;
            }
        }
        for id in s.disabled.clone() {
            s.set_enabled(&id, false)?;
        }
        for (id, p) in s.priorities.clone() {
            match s.pipelines.iter_mut().find(|e| e.id == id) {
                Some(e) => e.priority = p,
                None => return Err(ScenarioError::Invalid(format!("priority for unknown pipeline {id:?}"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn resolve(&self, rel: &str) -> Result<PathBuf, ScenarioError> {
        let p = Path::new(rel);
        let candidates = if p.is_absolute() {
            vec![p.to_path_buf()]
        } else {
            vec![self.base_dir.join(p), assets_dir().join(p)]
        };
        candidates
            .into_iter()
            .find(|c| c.is_file())
            .ok_or_else(|| ScenarioError::MissingAsset(rel.to_string()))
    }

    pub fn track_path(&self) -> Result<PathBuf, ScenarioError> {
        self.resolve(&self.track)
    }

    pub fn set_enabled(&mut self, id: &str, enabled: bool) -> Result<(), ScenarioError> {
        match self.pipelines.iter_mut().find(|e| e.id == id) {
            Some(e) => {
                e.enabled = enabled;
                Ok(())
            }
            None => Err(ScenarioError::Invalid(format!("unknown pipeline {id:?}"))),
        }
    }

    /// Keeps only the listed pipelines enabled.
    pub fn restrict_to(&mut self, ids: &[String]) -> Result<(), ScenarioError> {
        for id in ids {
            if !self.pipelines.iter().any(|e| &e.id == id) {
                return Err(ScenarioError::Invalid(format!("unknown pipeline {id:?}")));
            }
        }
        for e in &mut self.pipelines {
            e.enabled = ids.contains(&e.id);
        }
        self.validate()
    }

    pub fn enabled_pipelines(&self) -> impl Iterator<Item = &PipelineEntry> {
        self.pipelines.iter().filter(|e| e.enabled)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.dt > 0.0 && self.dt <= crate::sim::MAX_DT) {
            return bad(format!("dt {} outside (0, {}]", self.dt, crate::sim::MAX_DT));
        }
        let dt_ns = (self.dt * 1e9).round() as u64;
        if DECISION_PERIOD_NS % dt_ns != 0 || SENSOR_PERIOD_NS % dt_ns != 0 {
            return bad("dt must divide the 10 ms sensor period".into());
        }
        if self.seed > MAX_SEED {
            return bad(format!("seed must not exceed {MAX_SEED}"));
        }
        if !(self.max_sim_s > 0.0 && self.max_sim_s.is_finite()) {
            return bad("max_sim_s must be positive".into());
        }
        if !(self.pace >= 0.0 && self.pace.is_finite()) {
            return bad("pace must be non-negative".into());
        }
        if !self.margin.is_finite() {
            return bad("margin must be finite".into());
        }
        if self.mission.total_laps() == 0 {
            return bad("mission needs at least one lap".into());
        }
        self.vehicle.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.arbitration.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.health.validate().map_err(ScenarioError::Invalid)?;
        self.estimator.config.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.fault_schedule()?;
        let mut ids = HashSet::new();
        for e in &self.pipelines {
            if !ids.insert(e.id.as_str()) {
                return bad(format!("duplicate pipeline id {:?}", e.id));
            }
            if !(e.priority.is_finite() && e.priority >= 0.0) {
                return bad(format!("pipeline {:?}: priority must be non-negative", e.id));
            }
            self.pipeline_config(e, Path::new(&self.track))
                .validate()
                .map_err(|err| ScenarioError::Invalid(format!("pipeline {:?}: {err}", e.id)))?;
        }
        if self.enabled_pipelines().next().is_none() {
            return bad("no enabled pipelines".into());
        }
        for ev in &self.events {
            if !(ev.at_s >= 0.0 && ev.at_s.is_finite()) {
                return bad("event time must be non-negative".into());
            }
            match (&ev.kill, &ev.hmi) {
                (Some(id), None) => {
                    if !ids.contains(id.as_str()) {
                        return bad(format!("kill of unknown pipeline {id:?}"));
                    }
                }
                (None, Some(m)) => {
                    m.clone().into_kind().map_err(|e| ScenarioError::Invalid(e.0))?;
                }
                _ => return bad("each event needs exactly one of kill or hmi".into()),
            }
        }
        Ok(())
    }

    pub fn fault_schedule(&self) -> Result<FaultSchedule, ScenarioError> {
        let mut entries = self.faults.entries.clone();
        if let Some(d) = self.faults.gps_dropouts {
            if !(d.first_s >= 0.0 && d.period_s > d.duration_s && d.duration_s > 0.0) {
                return Err(ScenarioError::Invalid(
                    "gps_dropouts needs first_s >= 0 and period_s > duration_s > 0".into(),
                ));
            }
            entries.extend(FaultSchedule::periodic_gps_dropouts(d.first_s, d.period_s, d.duration_s, self.max_sim_s).entries);
        }
        entries.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
        FaultSchedule::new(entries).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    pub fn geometry(&self) -> VehicleGeometry {
        VehicleGeometry {
            wheelbase: self.vehicle.wheelbase,
            delta_max: self.vehicle.delta_max,
        }
    }

    /// Arbitration settings with the gate's geometry taken from the vehicle.
    pub fn arbitration_config(&self) -> ArbitrationConfig {
        ArbitrationConfig {
            geometry: self.geometry(),
            ..self.arbitration
        }
    }

    /// Adapter profile for the simulated vehicle: lock from the vehicle, and
    /// positive road-wheel angles turn left.
    pub fn adapter_profile(&self) -> AdapterProfile {
        AdapterProfile {
            delta_max: self.vehicle.delta_max,
            steer_sign: -1.0,
            ..self.adapter
        }
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        let mut c = self.estimator.config;
        if self.estimator.steering_feedback {
            c.steering = Some(SteeringModel {
                wheelbase: self.vehicle.wheelbase,
                tau_steer: self.vehicle.tau_steer,
            });
        }
        c
    }

    /// The configuration handed to a pipeline: its own parameters with the
    /// vehicle geometry and top speed filled in from the scenario.
    pub fn pipeline_config(&self, e: &PipelineEntry, track: &Path) -> PipelineConfig {
        let index = self.pipelines.iter().position(|p| p.id == e.id).unwrap_or(0) as u64;
        let mut c = PipelineConfig::new(e.id.clone(), e.kind, track.to_string_lossy());
        if let Some(r) = e.tick_rate_hz {
            c.tick_rate_hz = r;
        }
        c.heartbeat_period_ms = self.health.heartbeat_period_ms;
        c.seed = e
            .seed
            .unwrap_or_else(|| self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index + 1) & MAX_SEED);
        c.geometry = self.geometry();
        c.pursuit = PursuitParams {
            v_cap: e.pursuit.v_cap.min(self.vehicle.v_max),
            ..e.pursuit
        };
        c.stochastic = e.stochastic;
        c.teleop = e.teleop;
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

pub const SENSOR_PERIOD_NS: u64 = 10_000_000;
pub const DECISION_PERIOD_NS: u64 = 20_000_000;

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
track = "tracks/oval.csv"
mission = { format = "fixed_laps", n = 2 }

[[pipelines]]
id = "classic"
kind = "classic"

[[pipelines]]
id = "stochastic"
kind = "stochastic"
priority = 0.8
"#;

    fn assets() -> PathBuf {
        assets_dir()
    }

    #[test]
    fn minimal_parses_with_defaults() {
        let s = Scenario::parse(MINIMAL, &assets()).unwrap();
        assert_eq!(s.dt, 0.005);
        assert_eq!(s.margin, 1.0);
        assert_eq!(s.enabled_pipelines().count(), 2);
        assert!(s.track_path().unwrap().ends_with("tracks/oval.csv"));
        let a = s.adapter_profile();
        assert_eq!(a.steer_sign, -1.0);
        assert_eq!(a.delta_max, s.vehicle.delta_max);
    }

    #[test]
    fn pipeline_config_takes_vehicle_scaling() {
        let mut s = Scenario::parse(MINIMAL, &assets()).unwrap();
        s.vehicle.wheelbase = 0.33;
        s.vehicle.v_max = 7.0;
        let c = s.pipeline_config(&s.pipelines[0], Path::new("/x.csv"));
        assert_eq!(c.geometry.wheelbase, 0.33);
        assert_eq!(c.pursuit.v_cap, 7.0);
        assert_eq!(c.track, "/x.csv");
        let c2 = s.pipeline_config(&s.pipelines[1], Path::new("/x.csv"));
        assert_ne!(c.seed, c2.seed);
    }

    #[test]
    fn rejects_bad_input() {
        let dup = MINIMAL.replace("id = \"stochastic\"", "id = \"classic\"");
        assert!(matches!(Scenario::parse(&dup, &assets()), Err(ScenarioError::Invalid(_))));
        let unknown = format!("{MINIMAL}\n[[events]]\nat_s = 1.0\nkill = \"nobody\"\n");
        assert!(Scenario::parse(&unknown, &assets()).is_err());
        let both = format!("{MINIMAL}\n[[events]]\nat_s = 1.0\nkill = \"classic\"\nhmi = {{ type = \"estop\" }}\n");
        assert!(Scenario::parse(&both, &assets()).is_err());
        let axes = format!("{MINIMAL}\n[[events]]\nat_s = 1.0\nhmi = {{ type = \"teleop_axes\", steering = 3.0, pedal = 0.0 }}\n");
        assert!(Scenario::parse(&axes, &assets()).is_err());
        assert!(Scenario::parse(&MINIMAL.replace("name", "nmae"), &assets()).is_err());
    }

    #[test]
    fn missing_track_is_reported() {
        let s = Scenario::parse(&MINIMAL.replace("oval.csv", "nope.csv"), &assets()).unwrap();
        assert!(matches!(s.track_path(), Err(ScenarioError::MissingAsset(_))));
    }

    #[test]
    fn periodic_dropouts_expand() {
        let mut s = Scenario::parse(MINIMAL, &assets()).unwrap();
        s.max_sim_s = 40.0;
        s.faults.gps_dropouts = Some(PeriodicDropouts {
            first_s: 10.0,
            period_s: 15.0,
            duration_s: 2.0,
        });
        let f = s.fault_schedule().unwrap();
        assert_eq!(f.dropout_windows(), vec![(10.0, 12.0), (25.0, 27.0)]);
    }

    #[test]
    fn restrict_and_overrides() {
        let text = MINIMAL.replace("mission =", "disabled = [\"stochastic\"]\npriorities = { classic = 2.0 }\nmission =");
        let mut s = Scenario::parse(&text, &assets()).unwrap();
        assert_eq!(s.enabled_pipelines().map(|e| e.id.as_str()).collect::<Vec<_>>(), vec!["classic"]);
        assert_eq!(s.pipelines[0].priority, 2.0);
        s.restrict_to(&["stochastic".to_string()]).unwrap();
        assert_eq!(s.enabled_pipelines().map(|e| e.id.as_str()).collect::<Vec<_>>(), vec!["stochastic"]);
        assert!(s.restrict_to(&["ghost".to_string()]).is_err());
        assert!(s.restrict_to(&[]).is_err());
    }
}
