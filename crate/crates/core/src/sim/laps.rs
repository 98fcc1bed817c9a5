/// Lap accounting with a hysteresis band: a lap completes when progress wraps
/// from the last 10% of the track into the first 10% while on track. After a
/// lap the counter re-arms only once the car has passed mid-track, so jitter
/// around the line never double-counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LapCounter {
    pub laps: u32,
    armed: bool,
}

pub const BAND: f64 = 0.10;

impl LapCounter {
    pub fn new() -> Self {
        LapCounter::default()
    }
}

/// Returns the updated counter and whether a lap completed on this tick.
pub fn lap_tick(
    prev_s: f64,
    new_s: f64,
    track_length: f64,
    on_track: bool,
    counter: LapCounter,
) -> (LapCounter, bool) {
    let mut c = counter;
    let (lo, hi) = (BAND * track_length, (1.0 - BAND) * track_length);
    let mid = 0.5 * track_length;
    if new_s >= mid - BAND * track_length && new_s <= mid + BAND * track_length {
        c.armed = true;
    }
    if c.armed && on_track && prev_s >= hi && new_s < lo {
        c.laps += 1;
        c.armed = false;
        return (c, true);
    }
    (c, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn armed() -> LapCounter {
        lap_tick(0.4, 0.5, 1.0, true, LapCounter::new()).0
    }

    #[test]
    fn wrap_completes_lap() {
        let (c, done) = lap_tick(0.99 * 200.0, 0.01 * 200.0, 200.0, true, lap_tick(90.0, 100.0, 200.0, true, LapCounter::new()).0);
        assert!(done);
        assert_eq!(c.laps, 1);
    }

    #[test]
    fn mid_track_motion_is_not_a_lap() {
        let (c, done) = lap_tick(0.40, 0.60, 1.0, true, armed());
        assert!(!done);
        assert_eq!(c.laps, 0);
    }

    #[test]
    fn jitter_near_the_line_is_ignored() {
        let mut c = armed();
        for i in 0..20 {
            let (a, b) = if i % 2 == 0 { (0.99, 0.98) } else { (0.98, 0.99) };
            let (n, done) = lap_tick(a, b, 1.0, true, c);
            assert!(!done);
            c = n;
        }
        let (c, done) = lap_tick(0.99, 0.01, 1.0, true, c);
        assert!(done);
        // back-and-forth across the line does not count again
        let (c, _) = lap_tick(0.01, 0.995, 1.0, true, c);
        let (c, done) = lap_tick(0.995, 0.005, 1.0, true, c);
        assert!(!done);
        assert_eq!(c.laps, 1);
    }

    #[test]
    fn off_track_wrap_does_not_count() {
        let (c, done) = lap_tick(0.99, 0.01, 1.0, false, armed());
        assert!(!done);
        assert_eq!(c.laps, 0);
    }

    #[test]
    fn standing_start_needs_a_full_lap() {
        // starting at s=0 and creeping backwards over the line is not a lap
        let (c, done) = lap_tick(0.0, 0.999, 1.0, true, LapCounter::new());
        let (_, done2) = lap_tick(0.999, 0.001, 1.0, true, c);
        assert!(!done && !done2);
    }
}
