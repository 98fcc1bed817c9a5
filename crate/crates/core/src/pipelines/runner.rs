//! Bus-facing loop shared by the pipeline executable and in-process
//! pipeline threads.
//!
//! The supervisor's per-tick margin broadcast doubles as the pipeline clock:
//! each `supervisor/margin` frame carries the current time, and a pipeline
//! ticks whenever that time falls on its own period.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::bus::{topics, BusError, Node, SubscribeOptions};
use crate::model::codec::Payload;
use crate::model::{
    ControlProposal, Heartbeat, HealthStatus, HmiCommand, HmiCommandKind, MarginUpdate, VehicleStateEstimate,
};
use crate::sim::TrackModel;

use super::{build, Pipeline, PipelineConfig, PipelineError, TeleopInput, TickInput, TickOutcome};

/// Pipeline plus the latest-value caches of its inputs.
pub struct Runner {
    cfg: PipelineConfig,
    pipeline: Box<dyn Pipeline>,
    estimate: Option<VehicleStateEstimate>,
    budget: f64,
    teleop: Option<TeleopInput>,
    teleop_pending: Option<(f64, f64)>,
    now_ns: u64,
    last_heartbeat_ns: Option<u64>,
    seq: u64,
}

/// What the runner wants published, in order.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Heartbeat(Heartbeat),
    Proposal(ControlProposal),
}

impl Runner {
    pub fn new(cfg: PipelineConfig, track: Arc<TrackModel>) -> Result<Self, PipelineError> {
        let pipeline = build(&cfg, track)?;
        Ok(Runner {
            cfg,
            pipeline,
            estimate: None,
            budget: 1.0,
            teleop: None,
            teleop_pending: None,
            now_ns: 0,
            last_heartbeat_ns: None,
            seq: 0,
        })
    }

    pub fn id(&self) -> &str {
        &self.cfg.id
    }

    pub fn on_estimate(&mut self, est: VehicleStateEstimate) {
        self.estimate = Some(est);
    }

    pub fn on_hmi(&mut self, cmd: &HmiCommand) {
        if let HmiCommandKind::TeleopAxes { steering, pedal } = cmd.kind {
            self.teleop_pending = Some((steering, pedal));
        }
    }

    fn heartbeat(&mut self, status: HealthStatus) -> Output {
        self.last_heartbeat_ns = Some(self.now_ns);
        Output::Heartbeat(Heartbeat {
            unit_id: self.cfg.id.clone(),
            tick_ns: self.now_ns,
            self_status: status,
        })
    }

    pub fn startup(&mut self) -> Output {
        self.heartbeat(HealthStatus::Healthy)
    }

    pub fn on_clock(&mut self, m: &MarginUpdate) -> Vec<Output> {
        self.now_ns = m.timestamp_ns;
        self.budget = m.margin * m.degradation;
        if let Some((steering, pedal)) = self.teleop_pending.take() {
            self.teleop = Some(TeleopInput {
                steering,
                pedal,
                received_ns: self.now_ns,
            });
        }
        let mut out = Vec::new();
        let hb_due = self.last_heartbeat_ns.map_or(true, |t| {
            self.now_ns.saturating_sub(t) as f64 >= self.cfg.heartbeat_period_ms * 1e6
        });
        if hb_due {
            out.push(self.heartbeat(HealthStatus::Healthy));
        }
        if self.now_ns % self.cfg.period_ns() != 0 {
            return out;
        }
        let started = Instant::now();
        let input = TickInput {
            now_ns: self.now_ns,
            estimate: self.estimate.as_ref(),
            budget: self.budget,
            teleop: self.teleop,
        };
        match self.pipeline.tick(&input) {
            TickOutcome::Propose { command, confidence } => {
                self.seq += 1;
                out.push(Output::Proposal(ControlProposal {
                    pipeline_id: self.cfg.id.clone(),
                    command,
                    confidence,
                    seq: self.seq,
                    compute_latency_us: started.elapsed().as_micros() as u64,
                }));
            }
            TickOutcome::Withhold(reason) => {
                log::debug!("{} withheld proposal: {reason:?}", self.cfg.id);
                out.push(self.heartbeat(HealthStatus::Degraded));
            }
        }
        out
    }
}

fn publish(node: &Node, id: &str, out: Output) -> Result<(), BusError> {
    match out {
        Output::Heartbeat(h) => node.publish(&topics::pipeline_heartbeat(id), h.to_payload()),
        Output::Proposal(p) => node.publish(&topics::pipeline_proposal(id), p.to_payload()),
    }
    .map(|_| ())
}

/// Runs until `stop` is set or the bus shuts down.
pub fn run(node: &Node, cfg: PipelineConfig, track: Arc<TrackModel>, stop: &AtomicBool) -> Result<(), PipelineError> {
    let mut runner = Runner::new(cfg, track)?;
    let id = runner.id().to_string();
    let sub = node.bus().subscribe_many(
        &[topics::ESTIMATOR_STATE, topics::SUPERVISOR_MARGIN, topics::HMI_COMMAND],
        SubscribeOptions {
            capacity: 4096,
            ..Default::default()
        },
    )?;
    publish(node, &id, runner.startup())?;
    while !stop.load(Ordering::Acquire) {
        let frame = match sub.recv_timeout(Duration::from_millis(50)) {
            Ok(Some(f)) => f,
            Ok(None) => continue,
            Err(BusError::Shutdown) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        let outputs = match frame.topic.as_str() {
            topics::ESTIMATOR_STATE => {
                match VehicleStateEstimate::from_payload(&frame.payload) {
                    Ok(e) => runner.on_estimate(e),
                    Err(e) => log::warn!("{id}: bad estimate payload: {e}"),
                }
                Vec::new()
            }
            topics::HMI_COMMAND => {
                match HmiCommand::from_payload(&frame.payload) {
                    Ok(c) => runner.on_hmi(&c),
                    Err(e) => log::warn!("{id}: bad hmi payload: {e}"),
                }
                Vec::new()
            }
            _ => match MarginUpdate::from_payload(&frame.payload) {
                Ok(m) => runner.on_clock(&m),
                Err(e) => {
                    log::warn!("{id}: bad margin payload: {e}");
                    Vec::new()
                }
            },
        };
        for o in outputs {
            match publish(node, &id, o) {
                Ok(()) => {}
                Err(BusError::Shutdown) => return Ok(()),
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::{Bus, NodeRegistration};
    use crate::pipelines::PipelineKind;
    use crate::sim::circle;

    fn margin(t_ms: u64) -> MarginUpdate {
        MarginUpdate {
            margin: 1.0,
            degradation: 1.0,
            timestamp_ns: t_ms * 1_000_000,
        }
    }

    fn est(t_ms: u64) -> VehicleStateEstimate {
        VehicleStateEstimate {
            speed: 5.0,
            timestamp_ns: t_ms * 1_000_000,
            ..Default::default()
        }
    }

    #[test]
    fn heartbeat_then_proposal_on_period() {
        let track = Arc::new(circle(20.0, 200, 3.0));
        let mut r = Runner::new(PipelineConfig::new("c", PipelineKind::Classic, ""), track).unwrap();
        assert!(matches!(r.startup(), Output::Heartbeat(_)));
        r.on_estimate(est(0));
        let out = r.on_clock(&margin(0));
        assert_eq!(out.len(), 1);
        assert!(matches!(out[0], Output::Proposal(_)));
        // off-period clock: nothing
        r.on_estimate(est(10));
        assert!(r.on_clock(&margin(10)).is_empty());
        let mut kinds = Vec::new();
        for t in (20..=100).step_by(20) {
            r.on_estimate(est(t));
            kinds.extend(r.on_clock(&margin(t)));
        }
        // heartbeat at 100 ms precedes that tick's proposal
        let n = kinds.len();
        assert!(matches!(kinds[n - 2], Output::Heartbeat(_)));
        assert!(matches!(kinds[n - 1], Output::Proposal(_)));
        let seqs: Vec<u64> = kinds
            .iter()
            .filter_map(|o| match o {
                Output::Proposal(p) => Some(p.seq),
                _ => None,
            })
            .collect();
        assert_eq!(seqs, vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn stale_estimate_gives_degraded_heartbeat() {
        let track = Arc::new(circle(20.0, 200, 3.0));
        let mut r = Runner::new(PipelineConfig::new("c", PipelineKind::Classic, ""), track).unwrap();
        r.startup();
        r.on_estimate(est(0));
        let out = r.on_clock(&margin(500));
        let last = out.last().unwrap();
        match last {
            Output::Heartbeat(h) => {
                assert_eq!(h.self_status, HealthStatus::Degraded);
                assert_eq!(h.tick_ns, 500_000_000);
            }
            o => panic!("{o:?}"),
        }
    }

    #[test]
    fn runs_on_a_bus_thread() {
        let bus = Bus::new();
        let sup = bus.register_node(NodeRegistration::master("sup")).unwrap();
        let node = bus.register_node(NodeRegistration::slave("c")).unwrap();
        let proposals = bus.subscribe("pipeline/c/proposal").unwrap();
        let beats = bus.subscribe("pipeline/c/heartbeat").unwrap();
        let stop = Arc::new(AtomicBool::new(false));
        let track = Arc::new(circle(20.0, 200, 3.0));
        let h = {
            let stop = stop.clone();
            std::thread::spawn(move || run(&node, PipelineConfig::new("c", PipelineKind::Classic, ""), track, &stop))
        };
        beats.recv_timeout(Duration::from_secs(2)).unwrap().expect("startup heartbeat");
        sup.publish(topics::ESTIMATOR_STATE, est(20).to_payload()).unwrap();
        sup.publish(topics::SUPERVISOR_MARGIN, margin(20).to_payload()).unwrap();
        let f = proposals.recv_timeout(Duration::from_secs(2)).unwrap().expect("proposal");
        let p = ControlProposal::from_payload(&f.payload).unwrap();
        assert_eq!(p.command.timestamp_ns, 20_000_000);
        stop.store(true, Ordering::Release);
        h.join().unwrap().unwrap();
    }
}
