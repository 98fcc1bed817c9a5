use racesup_core::decision::{ActiveSource, SelectReason};
use racesup_core::hmi::HmiMessage;
use racesup_core::runtime::{assets_dir, run, RunOptions, RunOutcome, Scenario, ScheduledEvent};

fn load(name: &str) -> Scenario {
    Scenario::load(&assets_dir().join(name)).unwrap()
}

#[test]
fn oval_classic_runs_three_laps() {
    let s = load("oval_classic.toml");
    let r = run(&s, RunOptions::default()).unwrap();
    print!("{}", r.table());
    assert_eq!(r.outcome, RunOutcome::Finished);
    assert_eq!(r.laps.len(), 3);
    assert_eq!(r.off_track_steps, 0);
    assert!(r.passed());
}


#[test]
fn small_scale_switches_only_with_stochastic() {
    let s = load("small_scale.toml");
    let r = run(&s, RunOptions::default()).unwrap();
    assert_eq!(r.outcome, RunOutcome::Finished);
    assert!(r.switches >= 1, "{}", r.table());

    let mut s = load("small_scale.toml");
    s.set_enabled("stochastic", false).unwrap();
    let r = run(&s, RunOptions::default()).unwrap();
    assert_eq!(r.outcome, RunOutcome::Finished);
    assert_eq!(r.switches, 0, "{}", r.table());
}

#[test]
fn teleop_override_takes_effect_within_persistence_and_blend() {
    let mut s = load("small_scale.toml");
    s.set_enabled("stochastic", false).unwrap();
    s.mission = racesup_core::supervisor::MissionFormat::FixedLaps { n: 1 };
    let at = 10.0;
    for i in 0..20 {
        s.events.push(ScheduledEvent {
            at_s: at - 0.1 + i as f64 * 0.1,
            kill: None,
            hmi: Some(HmiMessage::TeleopAxes { steering: 0.0, pedal: 0.1 }),
        });
    }
    s.events.push(ScheduledEvent {
        at_s: at,
        kill: None,
        hmi: Some(HmiMessage::SelectPipeline {
            pipeline_id: Some("teleop".into()),
        }),
    });
    s.events.push(ScheduledEvent {
        at_s: at + 1.5,
        kill: None,
        hmi: Some(HmiMessage::SelectPipeline { pipeline_id: None }),
    });
    let r = run(&s, RunOptions::default()).unwrap();
    let t0 = (at * 1e9) as u64;
    let first = r
        .selections
        .iter()
        .find(|x| x.t_ns >= t0 && x.selection.active == ActiveSource::Pipeline("teleop".into()))
        .expect("teleop selected");
    assert_eq!(first.selection.reason, SelectReason::HmiOverride);
    let ticks = (first.t_ns - t0) / 20_000_000;
    let bound = s.arbitration.persistence as u64 + (s.arbitration.blend_s / 0.02).round() as u64;
    assert!(ticks <= bound, "{ticks} ticks");
    let full = r
        .selections
        .iter()
        .find(|x| x.t_ns >= first.t_ns && x.selection.active == ActiveSource::Pipeline("teleop".into()) && x.selection.blending.is_none())
        .unwrap();
    assert!((full.t_ns - t0) / 20_000_000 <= bound);
}

#[test]
fn failover_hands_over_and_finishes() {
    let s = load("failover.toml");
    let r = run(&s, RunOptions::default()).unwrap();
    assert_eq!(r.outcome, RunOutcome::Finished, "{}", r.table());
    assert_eq!(r.kills.len(), 1);
    let kill_t = r.kills[0].1;
    let after: Vec<_> = r.selections.iter().filter(|x| x.t_ns > kill_t).collect();
    assert!(after
        .iter()
        .any(|x| x.selection.active == ActiveSource::Pipeline("stochastic".into())));
    assert!(r.passed());
}
