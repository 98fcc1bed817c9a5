use std::collections::HashMap;

use crate::model::{ControlProposal, HealthStatus, NormalizedCommand};

use super::{clutch_blend, safety_gate, score, ActiveSource, ArbitrationConfig, BlendInfo, GateReason, SelectReason, Selection};

/// A pipeline's latest proposal with the context needed to score it.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub proposal: &'a ControlProposal,
    pub priority: f64,
    pub health: HealthStatus,
}

/// Dynamic-priority objective. The default is [`StaticPriority`].
pub trait Objective: Send {
    fn score(&self, c: &Candidate<'_>) -> f64;
}

/// `static_priority × health_factor × confidence_scalar`.
pub struct StaticPriority;

impl Objective for StaticPriority {
    fn score(&self, c: &Candidate<'_>) -> f64 {
        score(c.proposal, c.priority, c.health)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ArbitrationInput<'a> {
    pub now_ns: u64,
    pub candidates: &'a [Candidate<'a>],
    /// Estimated vehicle speed, m/s.
    pub speed: f64,
    /// Safety margin times degradation factor.
    pub budget: f64,
    pub hmi_override: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateVerdict {
    pub pipeline_id: String,
    pub verdict: Result<(), GateReason>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionOutput {
    pub selection: Selection,
    /// Set on the tick the fallback engages.
    pub raise_fault: bool,
    pub verdicts: Vec<GateVerdict>,
}

#[derive(Debug, Clone)]
struct BlendState {
    from_cmd: NormalizedCommand,
    from_id: Option<String>,
    start_ns: u64,
}

#[derive(Debug, Clone, Copy)]
struct SteerHistory {
    seq: u64,
    steering: f64,
    prev: Option<f64>,
}

/// Per-tick arbitration with hysteresis, persistence, clutch blending and
/// the safe-stop fallback. Deterministic given its input sequence.
pub struct Arbiter {
    cfg: ArbitrationConfig,
    objective: Box<dyn Objective>,
    incumbent: Option<String>,
    challenger: Option<(String, u32)>,
    history: HashMap<String, SteerHistory>,
    last_cmd: Option<NormalizedCommand>,
    last_source: Option<String>,
    blend: Option<BlendState>,
    in_fallback: bool,
}

impl Arbiter {
    pub fn new(cfg: ArbitrationConfig) -> Self {
        Self::with_objective(cfg, Box::new(StaticPriority))
    }

    pub fn with_objective(cfg: ArbitrationConfig, objective: Box<dyn Objective>) -> Self {
        Arbiter {
            cfg,
            objective,
            incumbent: None,
            challenger: None,
            history: HashMap::new(),
            last_cmd: None,
            last_source: None,
            blend: None,
            in_fallback: false,
        }
    }

    pub fn config(&self) -> &ArbitrationConfig {
        &self.cfg
    }

    pub fn incumbent(&self) -> Option<&str> {
        self.incumbent.as_deref()
    }

    pub fn is_blending(&self) -> bool {
        self.blend.is_some()
    }

    /// Records a command emitted outside arbitration (e.g. braking while not
    /// driving) so the next hand-over blends from what the vehicle actually
    /// received.
    pub fn observe_external(&mut self, cmd: NormalizedCommand) {
        self.last_cmd = Some(cmd);
        self.last_source = None;
        self.incumbent = None;
        self.challenger = None;
        self.blend = None;
    }

    fn prev_steering(&mut self, p: &ControlProposal) -> Option<f64> {
        match self.history.get_mut(&p.pipeline_id) {
            None => {
                self.history.insert(
                    p.pipeline_id.clone(),
                    SteerHistory {
                        seq: p.seq,
                        steering: p.command.steering,
                        prev: None,
                    },
                );
                None
            }
            Some(h) if h.seq == p.seq => h.prev,
            Some(h) => {
                h.prev = Some(h.steering);
                h.seq = p.seq;
                h.steering = p.command.steering;
                h.prev
            }
        }
    }

    pub fn arbitrate(&mut self, input: &ArbitrationInput<'_>) -> DecisionOutput {
        let now = input.now_ns;
        let mut order: Vec<&Candidate<'_>> = input.candidates.iter().collect();
        order.sort_by(|a, b| a.proposal.pipeline_id.cmp(&b.proposal.pipeline_id));

        let mut verdicts = Vec::with_capacity(order.len());
        let mut admissible: Vec<(&Candidate<'_>, f64)> = Vec::new();
        for c in order {
            let prev = self.prev_steering(c.proposal);
            let verdict = safety_gate(c.proposal, now, input.speed, prev, input.budget, &self.cfg);
            let s = if verdict.is_ok() {
                let s = self.objective.score(c);
                if s.is_finite() {
                    s.max(0.0)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            if verdict.is_ok() {
                admissible.push((c, s));
            }
            verdicts.push(GateVerdict {
                pipeline_id: c.proposal.pipeline_id.clone(),
                verdict,
                score: s,
            });
        }

        if admissible.is_empty() {
            let steering = self.last_cmd.map_or(0.0, |c| c.steering);
            let cmd = NormalizedCommand::new(steering, self.cfg.safe_stop_pedal, now);
            let raise_fault = !self.in_fallback;
            self.in_fallback = true;
            self.incumbent = None;
            self.challenger = None;
            self.blend = None;
            self.last_cmd = Some(cmd);
            self.last_source = None;
            return DecisionOutput {
                selection: Selection::fallback(cmd),
                raise_fault,
                verdicts,
            };
        }
        self.in_fallback = false;

        let find = |id: &str| admissible.iter().find(|(c, _)| c.proposal.pipeline_id == id).copied();
        // Highest score; admissible is sorted by id, so the first maximum
        // is the lexicographically smallest.
        let argmax = |exclude: Option<&str>| {
            let mut best: Option<(&Candidate<'_>, f64)> = None;
            for &(c, s) in &admissible {
                if Some(c.proposal.pipeline_id.as_str()) == exclude {
                    continue;
                }
                if best.map_or(true, |(_, bs)| s > bs) {
                    best = Some((c, s));
                }
            }
            best
        };

        let override_target = input.hmi_override.and_then(find);
        let incumbent = self.incumbent.as_deref().and_then(find).filter(|(_, s)| *s > 0.0);
        let (target, reason): (String, SelectReason) = if let Some((c, _)) = override_target {
            self.challenger = None;
            (c.proposal.pipeline_id.clone(), SelectReason::HmiOverride)
        } else if let Some((inc, inc_score)) = incumbent {
            let inc_id = inc.proposal.pipeline_id.clone();
            match argmax(Some(&inc_id)) {
                Some((ch, ch_score)) if ch_score > inc_score * (1.0 + self.cfg.hysteresis) => {
                    let ch_id = ch.proposal.pipeline_id.clone();
                    let count = match &self.challenger {
                        Some((id, n)) if *id == ch_id => n + 1,
                        _ => 1,
                    };
                    if count >= self.cfg.persistence {
                        self.challenger = None;
                        (ch_id, SelectReason::Score)
                    } else {
                        self.challenger = Some((ch_id, count));
                        (inc_id, SelectReason::Score)
                    }
                }
                _ => {
                    self.challenger = None;
                    (inc_id, SelectReason::Score)
                }
            }
        } else {
            self.challenger = None;
            let (c, _) = argmax(None).expect("admissible set is non-empty");
            let id = c.proposal.pipeline_id.clone();
            let reason = match &self.incumbent {
                Some(old) if *old != id => SelectReason::SafetyOverride,
                _ => SelectReason::Score,
            };
            (id, reason)
        };

        if self.incumbent.as_deref() != Some(target.as_str()) {
            self.blend = self.last_cmd.map(|from_cmd| BlendState {
                from_cmd,
                from_id: self.last_source.clone(),
                start_ns: now,
            });
            self.incumbent = Some(target.clone());
        }

        let (tc, _) = find(&target).expect("target is admissible");
        let live = tc.proposal.command;
        let (mut cmd, blending) = match &self.blend {
            None => (live, None),
            Some(b) => {
                let t = now.saturating_sub(b.start_ns) as f64 / 1e9;
                let cmd = clutch_blend(&b.from_cmd, &live, t, self.cfg.blend_s);
                if t >= self.cfg.blend_s - 1e-9 {
                    (live, None)
                } else {
                    (
                        cmd,
                        Some(BlendInfo {
                            from_id: b.from_id.clone(),
                            to_id: target.clone(),
                            t_elapsed: t,
                        }),
                    )
                }
            }
        };
        if blending.is_none() {
            self.blend = None;
        }
        cmd.timestamp_ns = now;
        self.last_cmd = Some(cmd);
        self.last_source = Some(target.clone());
        DecisionOutput {
            selection: Selection {
                active: ActiveSource::Pipeline(target),
                command: cmd,
                blending,
                reason,
            },
            raise_fault: false,
            verdicts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_command, ConfidenceModel};
    use proptest::prelude::*;

    const TICK: u64 = 20_000_000;

    fn prop(id: &str, steering: f64, pedal: f64, weight: f64, seq: u64, ts: u64) -> ControlProposal {
        let cmd = NormalizedCommand::new(steering, pedal, ts);
        ControlProposal {
            pipeline_id: id.into(),
            command: cmd,
            confidence: ConfidenceModel::around(&cmd, 0.0, 0.0, weight),
            seq,
            compute_latency_us: 0,
        }
    }

    fn run_tick(a: &mut Arbiter, now: u64, props: &[ControlProposal], prios: &[f64], ov: Option<&str>) -> DecisionOutput {
        let cands: Vec<Candidate<'_>> = props
            .iter()
            .zip(prios)
            .map(|(p, &priority)| Candidate {
                proposal: p,
                priority,
                health: HealthStatus::Healthy,
            })
            .collect();
        a.arbitrate(&ArbitrationInput {
            now_ns: now,
            candidates: &cands,
            speed: 5.0,
            budget: 1.0,
            hmi_override: ov,
        })
    }

    fn active(o: &DecisionOutput) -> Option<&str> {
        o.selection.active.pipeline_id()
    }

    #[test]
    fn argmax_without_incumbent() {
        let mut a = Arbiter::new(ArbitrationConfig::default());
        let ps = [prop("a", 0.0, 0.1, 0.9, 1, 0), prop("b", 0.0, 0.1, 0.5, 1, 0)];
        assert_eq!(active(&run_tick(&mut a, 0, &ps, &[1.0, 1.0], None)), Some("a"));
    }

    #[test]
    fn ties_break_lexicographically() {
        let mut a = Arbiter::new(ArbitrationConfig::default());
        let ps = [prop("zeta", 0.0, 0.1, 0.5, 1, 0), prop("alpha", 0.0, 0.1, 0.5, 1, 0)];
        assert_eq!(active(&run_tick(&mut a, 0, &ps, &[1.0, 1.0], None)), Some("alpha"));
    }

    #[test]
    fn hysteresis_retains_incumbent() {
        let mut a = Arbiter::new(ArbitrationConfig::default());
        let ps = [prop("a", 0.0, 0.1, 1.0, 1, 0), prop("b", 0.0, 0.1, 1.0, 1, 0)];
        run_tick(&mut a, 0, &ps, &[1.0, 0.5], None);
        for k in 1..50u64 {
            let ps = [prop("a", 0.0, 0.1, 1.0, k + 1, k * TICK), prop("b", 0.0, 0.1, 1.0, k + 1, k * TICK)];
            // 1.1 < 1.0 × 1.2
            let o = run_tick(&mut a, k * TICK, &ps, &[1.0, 1.1], None);
            assert_eq!(active(&o), Some("a"));
        }
    }

    #[test]
    fn persistent_challenger_switches_after_k_ticks() {
        let mut a = Arbiter::new(ArbitrationConfig::default());
        let ps = [prop("a", 0.0, 0.1, 1.0, 1, 0), prop("b", 0.0, 0.1, 1.0, 1, 0)];
        run_tick(&mut a, 0, &ps, &[1.0, 0.5], None);
        let mut switched_at = None;
        for k in 1..20u64 {
            let ps = [prop("a", 0.0, 0.1, 1.0, k + 1, k * TICK), prop("b", 0.0, 0.1, 1.0, k + 1, k * TICK)];
            let o = run_tick(&mut a, k * TICK, &ps, &[1.0, 1.5], None);
            if active(&o) == Some("b") && switched_at.is_none() {
                switched_at = Some(k);
            }
        }
        assert_eq!(switched_at, Some(5));
    }

    #[test]
    fn all_stale_falls_back() {
        let mut a = Arbiter::new(ArbitrationConfig::default());
        let ps = [prop("a", 0.3, 0.4, 1.0, 1, 0)];
        run_tick(&mut a, 0, &ps, &[1.0], None);
        let o = run_tick(&mut a, 300_000_000, &ps, &[1.0], None);
        assert_eq!(o.selection.active, ActiveSource::SafeStopFallback);
        assert_eq!(o.selection.command.pedal, -0.5);
        assert_eq!(o.selection.command.steering, 0.3);
        assert!(o.raise_fault);
        assert_eq!(o.verdicts[0].verdict, Err(GateReason::Stale));
        // the fault is raised once per fallback episode
        let o = run_tick(&mut a, 320_000_000, &ps, &[1.0], None);
        assert!(!o.raise_fault);
    }

    #[test]
    fn safety_override_blends_for_exactly_t() {
        let mut a = Arbiter::new(ArbitrationConfig::default());
        let mut first_blend = None;
        let mut last_blend = None;
        for k in 0..60u64 {
            let now = k * TICK;
            // a's cached proposal stops updating after k = 9
            let ka = k.min(9);
            let ps = vec![prop("b", 0.4, 0.6, 1.0, k + 1, now), prop("a", -0.4, 0.2, 1.0, ka + 1, ka * TICK)];
            let prios = vec![1.0, 2.0];
            let o = run_tick(&mut a, now, &ps, &prios, None);
            if k < 10 {
                assert_eq!(active(&o), Some("a"));
            }
            if let Some(b) = &o.selection.blending {
                assert_eq!(b.to_id, "b");
                first_blend.get_or_insert(k);
                last_blend = Some(k);
            }
        }
        // a's last proposal (k=9) goes stale after 150 ms → override at k=17
        let (f, l) = (first_blend.unwrap(), last_blend.unwrap());
        assert_eq!(f, 17);
        assert_eq!(l - f + 1, 25);
    }

    #[test]
    fn hmi_override_selects_admissible_pipeline() {
        let mut a = Arbiter::new(ArbitrationConfig::default());
        let ps = [prop("a", 0.0, 0.1, 1.0, 1, 0), prop("t", 0.0, 0.1, 0.5, 1, 0)];
        let o = run_tick(&mut a, 0, &ps, &[1.0, 1.0], Some("t"));
        assert_eq!(active(&o), Some("t"));
        assert_eq!(o.selection.reason, SelectReason::HmiOverride);
        // an inadmissible override target is ignored
        let ps = [prop("a", 0.0, 0.1, 1.0, 2, TICK), prop("t", 0.0, 0.1, 0.01, 2, TICK)];
        let o = run_tick(&mut a, TICK, &ps, &[1.0, 1.0], Some("t"));
        assert_eq!(active(&o), Some("a"));
    }

    #[test]
    fn retargets_from_current_blend() {
        let mut a = Arbiter::new(ArbitrationConfig::default());
        // a drives, then becomes stale; b takes over; mid-blend b goes low
        // confidence and c takes over from the blended command
        let mut outputs = Vec::new();
        for k in 0..40u64 {
            let now = k * TICK;
            let mut ps = Vec::new();
            if k < 1 {
                ps.push(prop("a", -0.5, 0.0, 1.0, k + 1, now));
            }
            ps.push(prop("b", 0.5, 0.5, if k < 20 { 1.0 } else { 0.01 }, k + 1, now));
            ps.push(prop("c", 0.0, 0.3, 1.0, k + 1, now));
            let prios: Vec<f64> = ps.iter().map(|p| if p.pipeline_id == "c" { 0.1 } else { 1.0 }).collect();
            outputs.push(run_tick(&mut a, now, &ps, &prios, None));
        }
        let at20 = &outputs[20];
        assert_eq!(active(at20), Some("c"));
        let b = at20.selection.blending.as_ref().unwrap();
        assert_eq!(b.from_id.as_deref(), Some("b"));
        assert_eq!(b.t_elapsed, 0.0);
        assert_eq!(at20.selection.command.steering, outputs[19].selection.command.steering);
    }

    fn arb_round() -> impl Strategy<Value = Vec<(u8, f64, f64, f64, u64, f64, u8)>> {
        // (id, steering, pedal, weight, age ms, priority, health)
        prop::collection::vec(
            (0u8..5, -1.2f64..1.2, -1.2f64..1.2, 0.0f64..=1.0, 0u64..300, 0.1f64..3.0, 0u8..5),
            0..6,
        )
    }

    fn health(h: u8) -> HealthStatus {
        [
            HealthStatus::Starting,
            HealthStatus::Healthy,
            HealthStatus::Degraded,
            HealthStatus::Unhealthy,
            HealthStatus::Dead,
        ][h as usize]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn safety_dominance(rounds in prop::collection::vec(arb_round(), 1..40), speed in 0.0f64..30.0) {
            let mut a = Arbiter::new(ArbitrationConfig::default());
            let mut seq = 0;
            for (k, round) in rounds.iter().enumerate() {
                let now = 1_000_000_000 + k as u64 * TICK;
                let mut props = Vec::new();
                let mut meta = Vec::new();
                for &(id, s, p, w, age, pr, h) in round {
                    let id = format!("p{id}");
                    if props.iter().any(|q: &ControlProposal| q.pipeline_id == id) { continue; }
                    seq += 1;
                    let cmd = NormalizedCommand::new(s, p, now - age * 1_000_000);
                    props.push(ControlProposal {
                        pipeline_id: id,
                        command: cmd,
                        confidence: ConfidenceModel { steer_mean: s.clamp(-1.0, 1.0), steer_std: 0.05, pedal_mean: p.clamp(-1.0, 1.0), pedal_std: 0.05, weight: w },
                        seq,
                        compute_latency_us: 0,
                    });
                    meta.push((pr, health(h)));
                }
                let cands: Vec<Candidate<'_>> = props.iter().zip(&meta).map(|(p, &(priority, health))| Candidate { proposal: p, priority, health }).collect();
                let out = a.arbitrate(&ArbitrationInput { now_ns: now, candidates: &cands, speed, budget: 1.0, hmi_override: None });
                prop_assert!(validate_command(out.selection.command).is_ok());
                let any_ok = out.verdicts.iter().any(|v| v.verdict.is_ok());
                match &out.selection.active {
                    ActiveSource::SafeStopFallback => prop_assert!(!any_ok),
                    ActiveSource::Pipeline(id) => {
                        let v = out.verdicts.iter().find(|v| &v.pipeline_id == id).unwrap();
                        prop_assert!(v.verdict.is_ok());
                        if out.selection.blending.is_none() {
                            let src = props.iter().find(|p| &p.pipeline_id == id).unwrap();
                            prop_assert_eq!(out.selection.command.steering, src.command.steering);
                            prop_assert_eq!(out.selection.command.pedal, src.command.pedal);
                        }
                    }
                }
            }
        }

        #[test]
        fn argmax_invariance(ws in prop::collection::vec((0.05f64..=1.0, 0.1f64..5.0), 1..6), c in 0.001f64..1000.0) {
            let props: Vec<ControlProposal> = ws.iter().enumerate().map(|(i, &(w, _))| prop(&format!("p{i}"), 0.0, 0.1, w, 1, 0)).collect();
            let prios: Vec<f64> = ws.iter().map(|&(_, p)| p).collect();
            let scaled: Vec<f64> = prios.iter().map(|p| p * c).collect();
            let x = run_tick(&mut Arbiter::new(ArbitrationConfig::default()), 0, &props, &prios, None);
            let y = run_tick(&mut Arbiter::new(ArbitrationConfig::default()), 0, &props, &scaled, None);
            prop_assert_eq!(x.selection.active, y.selection.active);
        }

        #[test]
        fn chattering_bound(noise in prop::collection::vec((-0.1f64..0.1, -0.1f64..0.1), 50..300)) {
            let mut a = Arbiter::new(ArbitrationConfig::default());
            let mut switches = Vec::new();
            let mut last: Option<String> = None;
            for (k, &(na, nb)) in noise.iter().enumerate() {
                let now = k as u64 * TICK;
                let ps = [prop("a", 0.0, 0.1, 1.0, k as u64 + 1, now), prop("b", 0.0, 0.1, 1.0, k as u64 + 1, now)];
                let o = run_tick(&mut a, now, &ps, &[1.0 + na, 1.0 + nb], None);
                let cur = active(&o).map(str::to_string);
                if last.is_some() && cur != last {
                    switches.push(k);
                }
                last = cur;
            }
            for w in switches.windows(2) {
                prop_assert!(w[1] - w[0] >= 5);
            }
        }

        #[test]
        fn clutch_continuity(steps in prop::collection::vec((-0.1f64..=0.1, -0.1f64..=0.1), 30..80), s0 in -0.5f64..0.5, p0 in -0.5f64..0.5) {
            let cfg = ArbitrationConfig::default();
            let mut a = Arbiter::new(cfg);
            // a drives with a fixed command, then goes stale; b's command
            // moves within the rate limit every tick
            let (mut bs, mut bp) = (s0, p0);
            let mut prev: Option<NormalizedCommand> = None;
            let dt = TICK as f64 / 1e9;
            for (k, &(ds, dp)) in steps.iter().enumerate() {
                let now = k as u64 * TICK;
                bs = (bs + ds).clamp(-1.0, 1.0);
                bp = (bp + dp).clamp(-1.0, 1.0);
                let mut ps = vec![prop("b", bs, bp, 1.0, k as u64 + 1, now)];
                let mut prios = vec![0.5];
                if k < 3 {
                    ps.push(prop("a", -0.8, 0.9, 1.0, k as u64 + 1, now));
                    prios.push(1.0);
                }
                let o = run_tick(&mut a, now, &ps, &prios, None);
                let cmd = o.selection.command;
                prop_assert!(cmd.steering.abs() <= 1.0 && cmd.pedal.abs() <= 1.0);
                if let Some(pc) = prev {
                    let bound_s = (bs - (-0.8f64)).abs().max(2.0) * dt / cfg.blend_s + cfg.r_max + 1e-9;
                    prop_assert!((cmd.steering - pc.steering).abs() <= bound_s);
                    prop_assert!((cmd.pedal - pc.pedal).abs() <= 2.0 * dt / cfg.blend_s + cfg.r_max + 1e-9);
                }
                prev = Some(cmd);
            }
        }
    }
}
