use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourceCeilings {
    /// Fraction of one core.
    pub cpu_fraction: Option<f64>,
    pub memory_mb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceSample {
    pub unit_id: String,
    pub pid: u32,
    /// `None` on the first sample of a process (no interval yet).
    pub cpu_fraction: Option<f64>,
    pub rss_bytes: u64,
}

/// Ceiling breaches, one description each.
pub fn breaches(sample: &ResourceSample, ceilings: &ResourceCeilings) -> Vec<String> {
    let mut out = Vec::new();
    if let (Some(max), Some(cpu)) = (ceilings.cpu_fraction, sample.cpu_fraction) {
        if cpu > max {
            out.push(format!("cpu {:.0}% above {:.0}%", cpu * 100.0, max * 100.0));
        }
    }
    if let Some(max_mb) = ceilings.memory_mb {
        let mb = sample.rss_bytes as f64 / (1024.0 * 1024.0);
        if mb > max_mb {
            out.push(format!("memory {mb:.0} MB above {max_mb:.0} MB"));
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ProcTimes {
    ticks: u64,
    at_ns: u64,
}

/// CPU ticks (utime + stime) and resident bytes of a live process.
fn read_proc(pid: u32) -> Option<(u64, u64)> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    let rest = &stat[stat.rfind(')')? + 2..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    if fields.first() == Some(&"Z") {
        return None;
    }
    // utime and stime are fields 14 and 15 of the full line.
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    let statm = std::fs::read_to_string(format!("/proc/{pid}/statm")).ok()?;
    let rss_pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some((utime + stime, rss_pages * page_size()))
}

fn page_size() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if v > 0 {
        v as u64
    } else {
        4096
    }
}

fn clock_ticks() -> f64 {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if v > 0 {
        v as f64
    } else {
        100.0
    }
}

/// Samples managed processes from `/proc`.
#[derive(Debug, Default)]
pub struct ResourceMonitor {
    prev: HashMap<u32, ProcTimes>,
}

impl ResourceMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    /// One sample per live unit; units without a process or whose process is
    /// gone are skipped.
    pub fn sample(&mut self, units: &[(String, Option<u32>)], now_ns: u64) -> Vec<ResourceSample> {
        let hz = clock_ticks();
        let mut out = Vec::new();
        let mut seen = HashMap::new();
        for (id, pid) in units {
            let Some(pid) = *pid else { continue };
            let Some((ticks, rss)) = read_proc(pid) else { continue };
            let cpu_fraction = self.prev.get(&pid).and_then(|p| {
                let dt = now_ns.checked_sub(p.at_ns)? as f64 / 1e9;
                (dt > 0.0).then(|| ticks.saturating_sub(p.ticks) as f64 / hz / dt)
            });
            seen.insert(pid, ProcTimes { ticks, at_ns: now_ns });
            out.push(ResourceSample {
                unit_id: id.clone(),
                pid,
                cpu_fraction,
                rss_bytes: rss,
            });
        }
        self.prev = seen;
        out
    }
}
