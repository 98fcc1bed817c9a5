//! `racesup`: run scenarios, replay session logs, lint tracks and echo bus
//! topics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use racesup_core::bus::{Bus, NodeRegistration};
use racesup_core::model::codec::peek_tag;
use racesup_core::runtime::{run, PipelineSet, RunOptions, RunOutcome, RunResult, Scenario};
use racesup_core::sim::TrackModel;
use racesup_core::supervisor::{read_log, replay};
use racesup_gateway::{Gateway, GatewayConfig, DEFAULT_LISTEN};
use serde_json::json;

const LOG_DIR_ENV: &str = "RACE_SUP_LOG_DIR";

#[derive(Parser)]
#[command(name = "racesup", version, about = "Supervisor for redundant racing pipelines")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct GatewayArgs {
    /// Web-socket endpoint for operator clients.
    #[arg(long, default_value = DEFAULT_LISTEN)]
    gateway_listen: String,
    /// Run without the gateway.
    #[arg(long)]
    headless: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario to completion.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Pipeline-set file replacing the scenario's pipelines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Listen endpoint for pipeline processes and `topics`.
        #[arg(long, default_value = "127.0.0.1:0")]
        bus_endpoint: String,
        #[command(flatten)]
        gateway: GatewayArgs,
        /// Real-time factor; 0 runs unpaced. Defaults to the scenario's pace.
        #[arg(long)]
        speed: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated pipeline ids to keep enabled.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Run pipelines as threads instead of processes.
        #[arg(long)]
        threads: bool,
        /// Pipeline executable; defaults to `racesup-pipeline` next to this binary.
        #[arg(long)]
        pipeline_exec: Option<PathBuf>,
    },
    /// Replay a session log onto a fresh bus.
    Replay {
        log: PathBuf,
        /// Playback speed; 0 replays as fast as possible.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Check track files.
    TrackLint {
        #[arg(required = true)]
        tracks: Vec<PathBuf>,
    },
    /// Print frames from a running session.
    Topics {
        #[arg(long)]
        bus_endpoint: String,
        #[arg(long, default_value = "#")]
        pattern: String,
        /// Stop after this many frames.
        #[arg(long)]
        count: Option<usize>,
        /// Stop after this many seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Run {
            scenario,
            config,
            bus_endpoint,
            gateway,
            speed,
            seed,
            only,
            threads,
            pipeline_exec,
        } => cmd_run(RunArgs {
            scenario,
            config,
            bus_endpoint,
            gateway,
            speed,
            seed,
            only,
            threads,
            pipeline_exec,
        }),
        Cmd::Replay { log, speed, gateway } => cmd_replay(&log, speed, &gateway),
        Cmd::TrackLint { tracks } => cmd_track_lint(&tracks),
        Cmd::Topics {
            bus_endpoint,
            pattern,
            count,
            duration,
        } => cmd_topics(&bus_endpoint, &pattern, count, duration),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

struct RunArgs {
    scenario: PathBuf,
    config: Option<PathBuf>,
    bus_endpoint: String,
    gateway: GatewayArgs,
    speed: Option<f64>,
    seed: Option<u64>,
    only: Vec<String>,
    threads: bool,
    pipeline_exec: Option<PathBuf>,
}

fn start_gateway(bus: &Bus, g: &GatewayArgs) -> Result<Option<Gateway>> {
    if g.headless {
        return Ok(None);
    }
    let gw = Gateway::start(
        bus,
        &GatewayConfig {
            listen: g.gateway_listen.clone(),
            ..Default::default()
        },
    )
    .with_context(|| format!("starting gateway on {}", g.gateway_listen))?;
    eprintln!("gateway on ws://{}", gw.local_addr());
    Ok(Some(gw))
}

fn default_pipeline_exec() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let p = exe.with_file_name("racesup-pipeline");
    p.is_file().then_some(p)
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let mut s = Scenario::load(&a.scenario)?;
    if let Some(cfg) = &a.config {
        let text = std::fs::read_to_string(cfg).with_context(|| format!("reading {}", cfg.display()))?;
        let set: PipelineSet = toml::from_str(&text).with_context(|| format!("parsing {}", cfg.display()))?;
        s.pipelines = set.pipelines;
        s.validate()?;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
        s.validate()?;
    }
    if let Some(speed) = a.speed {
        if !(speed.is_finite() && speed >= 0.0) {
            bail!("--speed must be non-negative");
        }
        s.pace = speed;
    }
    if !a.only.is_empty() {
        s.restrict_to(&a.only)?;
    }
    // Fail on a missing track before anything starts.
    s.track_path()?;

    let log_dir = std::env::var_os(LOG_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&log_dir).with_context(|| format!("creating {}", log_dir.display()))?;
    let bus = Bus::new();
    let addr = bus.listen(&a.bus_endpoint).with_context(|| format!("listening on {}", a.bus_endpoint))?;
    eprintln!("bus on {addr}");
    let gateway = start_gateway(&bus, &a.gateway)?;
    let pipeline_exec = if a.threads {
        None
    } else {
        a.pipeline_exec.or_else(default_pipeline_exec)
    };
    let opts = RunOptions {
        bus: Some(bus.clone()),
        bus_endpoint: a.bus_endpoint,
        pipeline_exec,
        log_dir: Some(log_dir.clone()),
        ..Default::default()
    };
    let result = run(&s, opts);
    drop(gateway);
    bus.shutdown();
    let result = result?;
    print!("{}", result.table());
    let stem = log_dir.join(&result.session);
    std::fs::write(stem.with_extension("results.txt"), result.table())?;
    std::fs::write(
        stem.with_extension("results.json"),
        serde_json::to_string_pretty(&results_json(&result))?,
    )?;
    if let Some(p) = &result.log_path {
        eprintln!("log {}", p.display());
    }
    Ok(match result.outcome {
        RunOutcome::Finished if result.passed() => ExitCode::SUCCESS,
        RunOutcome::Finished => ExitCode::from(3),
        _ => ExitCode::from(2),
    })
}

fn results_json(r: &RunResult) -> serde_json::Value {
    json!({
        "scenario": r.scenario,
        "seed": r.seed,
        "session": r.session,
        "outcome": r.outcome.as_str(),
        "laps": r.laps.iter().map(|l| json!({
            "lap": l.lap,
            "role": l.role.as_str(),
            "time_s": l.time_s,
        })).collect::<Vec<_>>(),
        "total_s": r.total_s,
        "sim_time_s": r.sim_time_s,
        "wall_time_s": r.wall_time_s,
        "off_track_steps": r.off_track_steps,
        "max_lateral_deviation_m": r.max_lateral_dev,
        "switches": r.switches,
        "response_timeouts": r.response_timeouts,
        "criteria": r.criteria.iter().map(|c| json!({
            "name": c.name,
            "passed": c.passed,
            "detail": c.detail,
        })).collect::<Vec<_>>(),
        "log": r.log_path.as_ref().map(|p| p.display().to_string()),
    })
}

fn cmd_replay(log: &Path, speed: f64, g: &GatewayArgs) -> Result<ExitCode> {
    if !(speed.is_finite() && speed >= 0.0) {
        bail!("--speed must be non-negative");
    }
    let contents = read_log(log).with_context(|| format!("reading {}", log.display()))?;
    let bus = Bus::new();
    let gateway = start_gateway(&bus, g)?;
    let t0 = Instant::now();
    let report = replay(&contents, &bus, (speed > 0.0).then_some(speed))?;
    drop(gateway);
    bus.shutdown();
    println!(
        "replayed {} frames in {:.3} s{}",
        report.frames,
        t0.elapsed().as_secs_f64(),
        if report.truncated { " (log truncated)" } else { "" }
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_track_lint(tracks: &[PathBuf]) -> Result<ExitCode> {
    let mut ok = true;
    for p in tracks {
        match TrackModel::from_csv_file(p) {
            Ok(t) => {
                let kmax = t.curvature().iter().fold(0.0f64, |m, k| m.max(k.abs()));
                println!(
                    "{}: ok, {} samples, length {:.1} m, {}, min radius {}",
                    p.display(),
                    t.samples().len(),
                    t.length(),
                    if t.closed { "closed" } else { "open" },
                    if kmax > 0.0 { format!("{:.1} m", 1.0 / kmax) } else { "inf".into() }
                );
            }
            Err(e) => {
                ok = false;
                println!("{}: {e}", p.display());
            }
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_topics(endpoint: &str, pattern: &str, count: Option<usize>, duration: Option<f64>) -> Result<ExitCode> {
    let reg = NodeRegistration::slave(format!("topics-{}", std::process::id()));
    let (bus, _node) = Bus::connect(endpoint, reg).with_context(|| format!("connecting to {endpoint}"))?;
    let sub = bus.subscribe(pattern)?;
    let deadline = duration.map(|d| Instant::now() + Duration::from_secs_f64(d));
    let mut n = 0;
    while count.map_or(true, |c| n < c) {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        match sub.recv_timeout(Duration::from_millis(100)) {
            Ok(Some(f)) => {
                n += 1;
                println!(
                    "{:>14} {:<28} seq {:<8} tag {:#04x} {} B",
                    f.timestamp_ns,
                    f.topic,
                    f.seq,
                    peek_tag(&f.payload).unwrap_or(0),
                    f.payload.len()
                );
            }
            Ok(None) => {}
            Err(_) => break,
        }
    }
    Ok(ExitCode::SUCCESS)
}
