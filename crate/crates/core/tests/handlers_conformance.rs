//! Drivers, modules and pipelines go through the same operation set.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use racesup_core::bus::{topics, Bus, NodeRegistration, SubscribeOptions};
use racesup_core::handlers::{
    transition_allowed, HandlerError, Handlers, HeartbeatSource, InProcessFn, Launch, RestartAction, StopOutcome,
    UnitContext, UnitKind, UnitSpec, UnitStatus,
};
use racesup_core::model::codec::Payload;
use racesup_core::model::{HealthStatus, Heartbeat};
use racesup_core::pipelines::{runner, PipelineConfig, PipelineKind};
use racesup_core::sim::TrackModel;

fn now_ns(t0: Instant) -> u64 {
    t0.elapsed().as_nanos() as u64
}

struct Fixture {
    spec: UnitSpec,
    crash: Box<dyn Fn(&mut Handlers)>,
}

fn driver() -> Fixture {
    let mut spec = UnitSpec::new(
        "lidar",
        UnitKind::Driver,
        Launch::Process {
            exec: "/bin/sh".into(),
            args: vec!["-c".into(), "sleep 60".into()],
            config: None,
        },
    );
    spec.heartbeat = HeartbeatSource::Synthetic;
    Fixture {
        spec,
        crash: Box::new(|h| {
            assert!(h.kill("lidar").unwrap());
        }),
    }
}

fn module() -> Fixture {
    let crashed = Arc::new(AtomicBool::new(false));
    let flag = crashed.clone();
    let f: InProcessFn = Arc::new(move |ctx: UnitContext| {
        flag.store(false, Ordering::SeqCst);
        while !ctx.should_stop() && !flag.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(2));
        }
    });
    let mut spec = UnitSpec::new("logger", UnitKind::Module, Launch::InProcess(f));
    spec.heartbeat = HeartbeatSource::Synthetic;
    Fixture {
        spec,
        crash: Box::new(move |_| {
            crashed.store(true, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(50));
        }),
    }
}

fn pipeline(bus: &Bus) -> Fixture {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/tracks/oval.csv");
    let track = Arc::new(TrackModel::from_csv_file(&path).unwrap());
    let crashed = Arc::new(AtomicBool::new(false));
    let flag = crashed.clone();
    let bus = bus.clone();
    let f: InProcessFn = Arc::new(move |ctx: UnitContext| {
        flag.store(false, Ordering::SeqCst);
        let node = bus.register_node(NodeRegistration::slave(ctx.unit_id.clone())).unwrap();
        let cfg = PipelineConfig::new(ctx.unit_id.clone(), PipelineKind::Classic, "");
        let stop = AtomicBool::new(false);
        std::thread::scope(|s| {
            s.spawn(|| {
                while !ctx.should_stop() && !flag.load(Ordering::SeqCst) {
                    std::thread::sleep(Duration::from_millis(2));
                }
                stop.store(true, Ordering::Release);
            });
            runner::run(&node, cfg, track.clone(), &stop).unwrap();
        });
    });
    let spec = UnitSpec::new("classic", UnitKind::Pipeline, Launch::InProcess(f));
    Fixture {
        spec,
        crash: Box::new(move |_| {
            crashed.store(true, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(100));
        }),
    }
}

/// Publishes the pipeline clock and feeds heartbeats into the handlers.
fn pump(h: &mut Handlers, bus: &Bus, sub: &racesup_core::bus::Subscription, t0: Instant) {
    let clock = racesup_core::model::MarginUpdate {
        margin: 1.0,
        degradation: 1.0,
        timestamp_ns: 0,
    };
    let _ = bus.publish_frame(racesup_core::bus::Frame::new(
        topics::SUPERVISOR_MARGIN,
        1,
        0,
        clock.to_payload(),
    ));
    for f in sub.drain() {
        if let Ok(hb) = Heartbeat::from_payload(&f.payload) {
            h.record_heartbeat(&hb, now_ns(t0));
        }
    }
}

fn conformance(fx: Fixture, bus: &Bus) {
    let id = fx.spec.unit_id.clone();
    let sub = bus
        .subscribe_with("pipeline/*/heartbeat", SubscribeOptions::default())
        .unwrap();
    let mut h = Handlers::new("local");
    let t0 = Instant::now();

    h.spawn(fx.spec.clone(), now_ns(t0)).unwrap();
    assert!(matches!(h.spawn(fx.spec.clone(), now_ns(t0)), Err(HandlerError::Duplicate(_))));

    let wait_running = |h: &mut Handlers| {
        let deadline = Instant::now() + Duration::from_secs(2);
        while h.status(&id) != Some(UnitStatus::Running) {
            assert!(Instant::now() < deadline, "{id} not Running within 2 s");
            pump(h, bus, &sub, t0);
            h.health_tick(&id, now_ns(t0)).unwrap();
            std::thread::sleep(Duration::from_millis(5));
        }
    };
    wait_running(&mut h);
    assert!(matches!(
        h.health_tick(&id, now_ns(t0)).unwrap().status,
        HealthStatus::Healthy | HealthStatus::Degraded
    ));

    (fx.crash)(&mut h);
    let deadline = Instant::now() + Duration::from_secs(2);
    while h.status(&id) != Some(UnitStatus::Dead) {
        assert!(Instant::now() < deadline, "{id} not Dead after crash");
        h.health_tick(&id, now_ns(t0)).unwrap();
        std::thread::sleep(Duration::from_millis(5));
    }
    let died = now_ns(t0);
    assert!(matches!(h.restart_if_needed(&id, died).unwrap(), RestartAction::Scheduled { attempt: 1, .. }));
    assert_eq!(
        h.restart_if_needed(&id, died + 500_000_000).unwrap(),
        RestartAction::Restarted { attempt: 1 }
    );
    wait_running(&mut h);

    assert_eq!(h.stop(&id, Duration::from_secs(2)).unwrap(), StopOutcome::Graceful);
    assert_eq!(h.status(&id), Some(UnitStatus::Stopped));
    assert_eq!(h.stop(&id, Duration::from_secs(2)).unwrap(), StopOutcome::AlreadyStopped);
    for (a, b) in h.transitions(&id) {
        assert!(transition_allowed(a, b), "{id}: {a:?} -> {b:?}");
    }
}

#[test]
fn driver_conforms() {
    conformance(driver(), &Bus::new());
}

#[test]
fn module_conforms() {
    conformance(module(), &Bus::new());
}

#[test]
fn pipeline_conforms() {
    let bus = Bus::new();
    conformance(pipeline(&bus), &bus);
}

fn group_members(pgid: u32) -> Vec<u32> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir("/proc").unwrap().flatten() {
        let Ok(pid) = entry.file_name().to_string_lossy().parse::<u32>() else {
            continue;
        };
        let Ok(stat) = std::fs::read_to_string(format!("/proc/{pid}/stat")) else {
            continue;
        };
        // fields after the parenthesised command: state ppid pgrp ...
        let rest = &stat[stat.rfind(')').unwrap() + 2..];
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields[0] != "Z" && fields[2].parse::<u32>().ok() == Some(pgid) {
            out.push(pid);
        }
    }
    out
}

#[test]
fn stop_leaves_no_orphans() {
    let mut h = Handlers::new("local");
    let mut spec = UnitSpec::new(
        "forker",
        UnitKind::Driver,
        Launch::Process {
            exec: "/bin/sh".into(),
            args: vec!["-c".into(), "sleep 60 & sleep 60 & wait".into()],
            config: None,
        },
    );
    spec.heartbeat = HeartbeatSource::Synthetic;
    h.spawn(spec, 0).unwrap();
    let pid = h.pid("forker").unwrap();
    let deadline = Instant::now() + Duration::from_secs(2);
    while group_members(pid).len() < 3 {
        assert!(Instant::now() < deadline, "children did not start");
        std::thread::sleep(Duration::from_millis(10));
    }
    h.stop("forker", Duration::from_millis(500)).unwrap();
    let deadline = Instant::now() + Duration::from_secs(2);
    loop {
        let left = group_members(pid);
        if left.is_empty() {
            break;
        }
        assert!(Instant::now() < deadline, "orphans left: {left:?}");
        std::thread::sleep(Duration::from_millis(10));
    }
}
