use super::plt::TrajectoryPoint;

/// Splits `points` into maximal runs of at least two fixes whose successive
/// gaps lie within `raw_interval ± tolerance` seconds.
pub fn select_by_interval(points: &[TrajectoryPoint], raw_interval: i64, tolerance: i64) -> Vec<Vec<TrajectoryPoint>> {
    let mut runs = Vec::new();
    let mut current: Vec<TrajectoryPoint> = Vec::new();
    for p in points {
        if let Some(last) = current.last() {
            let gap = p.timestamp - last.timestamp;
            if (gap - raw_interval).abs() > tolerance {
                if current.len() >= 2 {
                    runs.push(std::mem::take(&mut current));
                } else {
                    current.clear();
                }
            }
        }
        current.push(*p);
    }
    if current.len() >= 2 {
        runs.push(current);
    }
    runs
}

fn lerp(t: f64, t0: f64, v0: f64, t1: f64, v1: f64) -> f64 {
    if t1 == t0 {
        v0
    } else {
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }
}

/// Interpolated value at `t` from `(time, value)` knots sorted by time;
/// clamps outside the knot range.
fn sample(knots: &[(i64, f64)], t: i64, cursor: &mut usize) -> f64 {
    if t <= knots[0].0 {
        return knots[0].1;
    }
    let last = knots[knots.len() - 1];
    if t >= last.0 {
        return last.1;
    }
    while knots[*cursor + 1].0 < t {
        *cursor += 1;
    }
    let (a, b) = (knots[*cursor], knots[*cursor + 1]);
    lerp(t as f64, a.0 as f64, a.1, b.0 as f64, b.1)
}

/// Linearly resamples a run onto `t0, t0+Δ, …` up to its last fix. Missing
/// altitudes are bridged from the nearest valid neighbours. Returns an empty
/// list if the run spans less than one interval or has no valid altitude.
pub fn resample_linear(run: &[TrajectoryPoint], interval: i64) -> Vec<TrajectoryPoint> {
    if run.len() < 2 || interval <= 0 {
        return Vec::new();
    }
    let (t0, t_end) = (run[0].timestamp, run[run.len() - 1].timestamp);
    if t_end - t0 < interval {
        return Vec::new();
    }
    let lon: Vec<(i64, f64)> = run.iter().map(|p| (p.timestamp, p.lon)).collect();
    let lat: Vec<(i64, f64)> = run.iter().map(|p| (p.timestamp, p.lat)).collect();
    let alt: Vec<(i64, f64)> = run.iter().filter(|p| p.alt_valid).map(|p| (p.timestamp, p.alt)).collect();
    if alt.is_empty() {
        return Vec::new();
    }
    let (mut c_lon, mut c_lat, mut c_alt) = (0, 0, 0);
    let steps = (t_end - t0) / interval;
    (0..=steps)
        .map(|k| {
            let t = t0 + k * interval;
            TrajectoryPoint {
                timestamp: t,
                lon: sample(&lon, t, &mut c_lon),
                lat: sample(&lat, t, &mut c_lat),
                alt: sample(&alt, t, &mut c_alt),
                alt_valid: true,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(t: i64, v: f64) -> TrajectoryPoint {
        TrajectoryPoint {
            timestamp: t,
            lon: v,
            lat: v,
            alt: v,
            alt_valid: true,
        }
    }

    fn at(times: &[i64]) -> Vec<TrajectoryPoint> {
        times.iter().map(|&t| pt(t, 0.0)).collect()
    }

    #[test]
    fn uniform_gaps_form_one_run() {
        let runs = select_by_interval(&at(&[0, 5, 10, 15, 20]), 5, 1);
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].len(), 5);
    }

    #[test]
    fn large_gap_splits_runs() {
        // gaps 5, 5, 60, 5
        let runs = select_by_interval(&at(&[0, 5, 10, 70, 75]), 5, 1);
        let lens: Vec<usize> = runs.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![3, 2]);
    }

    #[test]
    fn jitter_within_tolerance_is_kept() {
        let runs = select_by_interval(&at(&[0, 6, 10, 16, 23]), 5, 1);
        let lens: Vec<usize> = runs.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![4]);
    }

    #[test]
    fn single_point_gives_no_run() {
        assert!(select_by_interval(&at(&[0]), 5, 1).is_empty());
        assert!(select_by_interval(&at(&[0, 100, 200]), 5, 1).is_empty());
    }

    #[test]
    fn midpoint_interpolation() {
        let out = resample_linear(&[pt(0, 0.0), pt(20, 10.0)], 10);
        let vals: Vec<f64> = out.iter().map(|p| p.lon).collect();
        assert_eq!(vals, vec![0.0, 5.0, 10.0]);
    }

    #[test]
    fn on_grid_points_are_unchanged() {
        let run: Vec<_> = (0..5).map(|k| pt(10 * k, (k * k) as f64)).collect();
        assert_eq!(resample_linear(&run, 10), run);
    }

    #[test]
    fn constant_run_stays_constant() {
        let run: Vec<_> = [0, 4, 9, 15, 21, 26, 30].iter().map(|&t| pt(t, 3.5)).collect();
        assert!(resample_linear(&run, 10).iter().all(|p| p.lon == 3.5 && p.alt == 3.5));
    }

    #[test]
    fn short_run_is_empty() {
        assert!(resample_linear(&[pt(0, 0.0), pt(5, 1.0)], 10).is_empty());
    }

    #[test]
    fn invalid_altitude_is_bridged() {
        let mut mid = pt(10, 99.0);
        mid.alt_valid = false;
        let out = resample_linear(&[pt(0, 0.0), mid, pt(20, 10.0)], 10);
        assert_eq!(out[1].alt, 5.0);
        assert_eq!(out[1].lon, 99.0);
    }
}
