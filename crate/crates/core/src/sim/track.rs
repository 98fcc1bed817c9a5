use std::path::Path;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrackError {
    #[error("io error reading track: {0}")]
    Io(String),
    #[error("track header must be `s,x,y,w_left,w_right`, found {0:?}")]
    Header(String),
    #[error("line {line}: {why}")]
    Parse { line: usize, why: String },
    #[error("invalid track: {0}")]
    Invalid(String),
    #[error("degenerate track geometry")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub w_left: f64,
    pub w_right: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub s: f64,
    /// Signed distance from the centerline, positive to the left.
    pub lateral_offset: f64,
    pub off_track: bool,
}

pub const MIN_SAMPLES: usize = 16;
pub const CSV_HEADER: &str = "s,x,y,w_left,w_right";

/// Centerline polyline with per-sample widths.
#[derive(Debug, Clone)]
pub struct TrackModel {
    pub name: String,
    pub closed: bool,
    samples: Vec<TrackSample>,
    length: f64,
    curvature: Vec<f64>,
}

impl TrackModel {
    pub fn new(name: impl Into<String>, samples: Vec<TrackSample>, closed: bool) -> Result<Self, TrackError> {
        validate_samples(&samples)?;
        let last = samples[samples.len() - 1];
        let length = if closed {
            last.s + (samples[0].x - last.x).hypot(samples[0].y - last.y)
        } else {
            last.s
        };
        if length <= 0.0 {
            return Err(TrackError::Degenerate);
        }
        let mut t = TrackModel {
            name: name.into(),
            closed,
            samples,
            length,
            curvature: Vec::new(),
        };
        t.curvature = t.compute_curvature();
        Ok(t)
    }

    pub fn from_csv_str(name: &str, text: &str) -> Result<Self, TrackError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| {
            let l = l.trim();
            !l.is_empty() && !l.starts_with('#')
        });
        let (_, header) = lines.next().ok_or_else(|| TrackError::Header(String::new()))?;
        if header.trim() != CSV_HEADER {
            return Err(TrackError::Header(header.trim().to_string()));
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| TrackError::Parse {
                    line: i + 1,
                    why: e.to_string(),
                })?;
            if vals.len() != 5 {
                return Err(TrackError::Parse {
                    line: i + 1,
                    why: format!("expected 5 fields, found {}", vals.len()),
                });
            }
            samples.push(TrackSample {
                s: vals[0],
                x: vals[1],
                y: vals[2],
                w_left: vals[3],
                w_right: vals[4],
            });
        }
        validate_samples(&samples)?;
        let closed = infer_closed(&samples);
        TrackModel::new(name, samples, closed)
    }

    pub fn from_csv_file(path: &Path) -> Result<Self, TrackError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrackError::Io(format!("{}: {e}", path.display())))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "track".into());
        Self::from_csv_str(&name, &text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for p in &self.samples {
            out.push_str(&format!("{},{},{},{},{}\n", p.s, p.x, p.y, p.w_left, p.w_right));
        }
        out
    }

    pub fn samples(&self) -> &[TrackSample] {
        &self.samples
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Signed centerline curvature at each sample (positive = turning left).
    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    fn segment_count(&self) -> usize {
        if self.closed {
            self.samples.len()
        } else {
            self.samples.len() - 1
        }
    }

    fn segment(&self, i: usize) -> (TrackSample, TrackSample, f64, f64) {
        let a = self.samples[i];
        let j = (i + 1) % self.samples.len();
        let b = self.samples[j];
        let s_end = if j == 0 { self.length } else { b.s };
        (a, b, a.s, s_end)
    }

    pub fn wrap_s(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.length)
        } else {
            s.clamp(0.0, self.length)
        }
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = self.wrap_s(s);
        let idx = match self
            .samples
            .binary_search_by(|p| p.s.partial_cmp(&s).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let idx = idx.min(self.segment_count().saturating_sub(1).max(0));
        let (_, _, s0, s1) = self.segment(idx);
        let t = if s1 > s0 { ((s - s0) / (s1 - s0)).clamp(0.0, 1.0) } else { 0.0 };
        (idx, t)
    }

    /// Centerline point at arc length `s` (wrapped on closed tracks).
    pub fn point_at(&self, s: f64) -> (f64, f64) {
        let (i, t) = self.locate(s);
        let (a, b, _, _) = self.segment(i);
        (a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
    }

    pub fn widths_at(&self, s: f64) -> (f64, f64) {
        let (i, t) = self.locate(s);
        let (a, b, _, _) = self.segment(i);
        (
            a.w_left + t * (b.w_left - a.w_left),
            a.w_right + t * (b.w_right - a.w_right),
        )
    }

    /// Nearest centerline point (linear interpolation between samples).
    pub fn progress(&self, x: f64, y: f64) -> Result<Progress, TrackError> {
        let mut best: Option<(f64, f64, f64)> = None; // (dist², s, signed offset)
        for i in 0..self.segment_count() {
            let (a, b, s0, s1) = self.segment(i);
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            if len2 == 0.0 {
                continue;
            }
            let t = (((x - a.x) * dx + (y - a.y) * dy) / len2).clamp(0.0, 1.0);
            let (px, py) = (a.x + t * dx, a.y + t * dy);
            let d2 = (x - px).powi(2) + (y - py).powi(2);
            if best.map_or(true, |(bd, _, _)| d2 < bd) {
                let cross = dx * (y - py) - dy * (x - px);
                let side = if cross >= 0.0 { 1.0 } else { -1.0 };
                best = Some((d2, s0 + t * (s1 - s0), side * d2.sqrt()));
            }
        }
        let (_, s, offset) = best.ok_or(TrackError::Degenerate)?;
        let s = self.wrap_s(s);
        let (wl, wr) = self.widths_at(s);
        Ok(Progress {
            s,
            lateral_offset: offset,
            off_track: offset > wl || offset < -wr,
        })
    }

    /// Largest |κ| over samples in [s, s + horizon].
    pub fn max_abs_curvature_ahead(&self, s: f64, horizon: f64) -> f64 {
        let n = self.samples.len();
        let s0 = self.wrap_s(s);
        let (start, _) = self.locate(s0);
        let mut best: f64 = 0.0;
        for k in 0..n {
            let i = start + k;
            if i >= n && !self.closed {
                break;
            }
            let i = i % n;
            let ahead = if self.closed {
                (self.samples[i].s - s0).rem_euclid(self.length)
            } else {
                self.samples[i].s - s0
            };
            if k > 0 && ahead > horizon {
                break;
            }
            best = best.max(self.curvature[i].abs());
        }
        best
    }

    fn compute_curvature(&self) -> Vec<f64> {
        let n = self.samples.len();
        (0..n)
            .map(|i| {
                let (ia, ic) = if self.closed {
                    ((i + n - 1) % n, (i + 1) % n)
                } else if i == 0 || i == n - 1 {
                    return 0.0;
                } else {
                    (i - 1, i + 1)
                };
                let (a, b, c) = (self.samples[ia], self.samples[i], self.samples[ic]);
                three_point_curvature((a.x, a.y), (b.x, b.y), (c.x, c.y))
            })
            .collect()
    }
}

/// Signed curvature of the circle through three points.
pub fn three_point_curvature(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0).hypot(b.1 - a.1);
    let bc = (c.0 - b.0).hypot(c.1 - b.1);
    let ca = (a.0 - c.0).hypot(a.1 - c.1);
    let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
    let denom = ab * bc * ca;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * cross / denom
    }
}

fn validate_samples(samples: &[TrackSample]) -> Result<(), TrackError> {
    if samples.len() < MIN_SAMPLES {
        return Err(TrackError::Invalid(format!(
            "{} samples, at least {MIN_SAMPLES} required",
            samples.len()
        )));
    }
    if samples[0].s != 0.0 {
        return Err(TrackError::Invalid(format!("first s is {}, must be 0", samples[0].s)));
    }
    for (i, p) in samples.iter().enumerate() {
        if ![p.s, p.x, p.y, p.w_left, p.w_right].iter().all(|v| v.is_finite()) {
            return Err(TrackError::Invalid(format!("sample {i} has a non-finite field")));
        }
        if p.w_left <= 0.0 || p.w_right <= 0.0 {
            return Err(TrackError::Invalid(format!("sample {i} has non-positive width")));
        }
        if i > 0 && p.s <= samples[i - 1].s {
            return Err(TrackError::Invalid(format!("s not strictly increasing at sample {i}")));
        }
    }
    Ok(())
}

/// A track is closed when its last sample sits within two sample spacings
/// of the first.
fn infer_closed(samples: &[TrackSample]) -> bool {
    let n = samples.len();
    let spacing = samples[n - 1].s / (n - 1) as f64;
    let gap = (samples[0].x - samples[n - 1].x).hypot(samples[0].y - samples[n - 1].y);
    gap <= 2.0 * spacing
}
