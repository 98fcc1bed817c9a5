use serde::{Deserialize, Serialize};

use crate::model::HealthStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Driver,
    Module,
    Pipeline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnitStatus {
    Stopped,
    Starting,
    Running,
    Unhealthy,
    Dead,
}

impl UnitStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitStatus::Stopped => "Stopped",
            UnitStatus::Starting => "Starting",
            UnitStatus::Running => "Running",
            UnitStatus::Unhealthy => "Unhealthy",
            UnitStatus::Dead => "Dead",
        }
    }
}

/// Edges of the lifecycle graph. Self-loops are not transitions.
pub fn transition_allowed(from: UnitStatus, to: UnitStatus) -> bool {
    use UnitStatus::*;
    matches!(
        (from, to),
        (Stopped, Starting)
            | (Starting, Running)
            | (Starting, Dead)
            | (Starting, Stopped)
            | (Running, Unhealthy)
            | (Running, Dead)
            | (Running, Stopped)
            | (Unhealthy, Running)
            | (Unhealthy, Dead)
            | (Unhealthy, Stopped)
            | (Dead, Stopped)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LifecycleEvent {
    Spawned,
    /// Outcome of a health evaluation.
    Health(HealthStatus),
    Stopped,
}

/// Next status. Events that have no edge from the current status leave it
/// unchanged.
pub fn lifecycle_step(status: UnitStatus, ev: LifecycleEvent) -> UnitStatus {
    use UnitStatus::*;
    let next = match (status, ev) {
        (Stopped, LifecycleEvent::Spawned) => Starting,
        (_, LifecycleEvent::Spawned) => status,
        (_, LifecycleEvent::Stopped) => Stopped,
        (Stopped | Dead, LifecycleEvent::Health(_)) => status,
        (_, LifecycleEvent::Health(HealthStatus::Dead)) => Dead,
        (Starting, LifecycleEvent::Health(HealthStatus::Healthy | HealthStatus::Degraded)) => Running,
        (Starting, LifecycleEvent::Health(_)) => Starting,
        (_, LifecycleEvent::Health(HealthStatus::Healthy | HealthStatus::Degraded)) => Running,
        (_, LifecycleEvent::Health(HealthStatus::Unhealthy)) => Unhealthy,
        (_, LifecycleEvent::Health(HealthStatus::Starting)) => status,
    };
    debug_assert!(next == status || transition_allowed(status, next));
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HealthPolicy {
    pub heartbeat_period_ms: f64,
    pub miss_threshold: u32,
    pub dead_threshold: u32,
}

impl Default for HealthPolicy {
    fn default() -> Self {
        HealthPolicy {
            heartbeat_period_ms: 100.0,
            miss_threshold: 3,
            dead_threshold: 10,
        }
    }
}

impl HealthPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.heartbeat_period_ms.is_finite() && self.heartbeat_period_ms > 0.0) {
            return Err("heartbeat period must be positive".into());
        }
        if !(self.miss_threshold >= 1 && self.dead_threshold > self.miss_threshold) {
            return Err("need dead_threshold > miss_threshold >= 1".into());
        }
        Ok(())
    }
}

/// Health from heartbeat age and liveness alone.
pub fn derive_health(age_ms: f64, alive: bool, self_status: HealthStatus, policy: &HealthPolicy) -> HealthStatus {
    let periods = age_ms / policy.heartbeat_period_ms;
    if !alive || periods > policy.dead_threshold as f64 {
        HealthStatus::Dead
    } else if periods > policy.miss_threshold as f64 {
        HealthStatus::Unhealthy
    } else if self_status == HealthStatus::Degraded {
        HealthStatus::Degraded
    } else {
        HealthStatus::Healthy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestartPolicy {
    pub max_restarts: u32,
    pub backoff_ms: f64,
}

impl Default for RestartPolicy {
    fn default() -> Self {
        RestartPolicy {
            max_restarts: 3,
            backoff_ms: 500.0,
        }
    }
}

impl RestartPolicy {
    /// Wait before restart number `attempt` (0-based).
    pub fn backoff_ms_for(&self, attempt: u32) -> f64 {
        self.backoff_ms * 2f64.powi(attempt as i32)
    }
}
