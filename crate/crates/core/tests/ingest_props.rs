use mmctp_core::ingest::{
    make_windows, resample_linear, select_by_interval, split_per_user, synthetic_dataset, time_features, window_count, DatasetStats,
    PreparedDataset, Split, SyntheticSpec, TrajectoryPoint, UniformSeries,
};
use proptest::prelude::*;

fn point(timestamp: i64, v: f64) -> TrajectoryPoint {
    TrajectoryPoint {
        timestamp,
        lon: 116.0 + v,
        lat: 39.0 - v,
        alt: 50.0 + 10.0 * v,
        alt_valid: true,
    }
}

fn series(user: &str, t0: i64, len: usize) -> UniformSeries {
    UniformSeries {
        user: user.into(),
        interval: 30,
        points: (0..len).map(|k| point(t0 + 30 * k as i64, (k as f64 * 0.37).sin())).collect(),
    }
}

const UNIT: DatasetStats = DatasetStats { mean: [0.0; 3], std: [1.0; 3] };

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_count_matches_enumeration(len in 0usize..=300, m in 1usize..60, n in 1usize..30) {
        let enumerated = (0..len).filter(|&s| s + m + n <= len).count();
        prop_assert_eq!(window_count(len, m, n), enumerated);
        let s = series("u", 1_230_768_000, len);
        prop_assert_eq!(make_windows(&s.points, 30, m, n, &UNIT).len(), enumerated);
    }

    #[test]
    fn window_grids_are_arithmetic(len in 10usize..120, m in 2usize..8, n in 1usize..5, t0 in 0i64..2_000_000_000) {
        let s = series("u", t0, len);
        for w in make_windows(&s.points, 30, m, n, &UNIT) {
            let ts = w.timestamps();
            prop_assert_eq!(ts.len(), m + n);
            prop_assert!(ts.windows(2).all(|p| p[1] - p[0] == 30));
            prop_assert_eq!(&ts[m..], &w.target_timestamps()[..]);
            for v in w.input_time.iter().chain(&w.target_time) {
                prop_assert!((-0.5..=0.5).contains(v));
            }
        }
    }

    #[test]
    fn time_features_stay_in_range(t in 0i64..4_102_444_800) {
        prop_assert!(time_features(t).iter().all(|v| (-0.5..=0.5).contains(v)));
    }

    #[test]
    fn splits_are_chronological_and_disjoint(
        users in prop::collection::vec(prop::collection::vec(1usize..400, 1..4), 1..4),
        min_window in 1usize..40,
    ) {
        let mut all = Vec::new();
        for (u, lens) in users.iter().enumerate() {
            let mut t = 1_230_768_000 + u as i64 * 10_000_000;
            for &len in lens {
                all.push(series(&format!("{u:03}"), t, len));
                t += 30 * len as i64 + 86_400;
            }
        }
        let splits = split_per_user(&all, min_window);
        // Absolute time ranges per user and split.
        let range = |split: Split, user: &str| {
            splits.get(split).iter().filter(|s| all[s.series].user == user).map(|s| {
                let p = &all[s.series].points;
                (p[s.start].timestamp, p[s.start + s.len - 1].timestamp)
            }).collect::<Vec<_>>()
        };
        for (u, _) in users.iter().enumerate() {
            let user = format!("{u:03}");
            let (tr, va, te) = (range(Split::Train, &user), range(Split::Val, &user), range(Split::Test, &user));
            let last = |r: &[(i64, i64)]| r.iter().map(|x| x.1).max();
            let first = |r: &[(i64, i64)]| r.iter().map(|x| x.0).min();
            if let (Some(a), Some(b)) = (last(&tr), first(&va)) { prop_assert!(a < b); }
            if let (Some(a), Some(b)) = (last(&va), first(&te)) { prop_assert!(a < b); }
            if let (Some(a), Some(b)) = (last(&tr), first(&te)) { prop_assert!(a < b); }
        }
        for split in [Split::Train, Split::Val, Split::Test] {
            for s in splits.get(split) {
                prop_assert!(s.len >= min_window);
                prop_assert!(s.start + s.len <= all[s.series].len());
            }
        }
    }

    #[test]
    fn interval_runs_match_gap_enumeration(gaps in prop::collection::vec(prop_oneof![Just(5i64), Just(4), Just(6), Just(9), Just(60)], 0..40)) {
        let mut t = 1_000;
        let mut pts = vec![point(t, 0.0)];
        for &g in &gaps {
            t += g;
            pts.push(point(t, 0.0));
        }
        // Oracle: cut wherever a gap leaves 5 ± 1 s; keep pieces of two or more points.
        let mut expected: Vec<usize> = Vec::new();
        let mut run = 1;
        for &g in &gaps {
            if (4..=6).contains(&g) { run += 1 } else { expected.push(run); run = 1 }
        }
        expected.push(run);
        expected.retain(|&r| r >= 2);
        let got: Vec<usize> = select_by_interval(&pts, 5, 1).iter().map(Vec::len).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn resampling_is_linear_between_fixes(times in prop::collection::btree_set(0i64..600, 2..20), slope in -1.0f64..1.0) {
        let times: Vec<i64> = times.into_iter().collect();
        let run: Vec<TrajectoryPoint> = times.iter().map(|&t| point(t, slope * t as f64)).collect();
        let out = resample_linear(&run, 10);
        prop_assert!(out.windows(2).all(|w| w[1].timestamp - w[0].timestamp == 10));
        for p in &out {
            prop_assert!(p.timestamp >= times[0] && p.timestamp <= *times.last().unwrap());
            let v = slope * p.timestamp as f64;
            prop_assert!((p.lon - (116.0 + v)).abs() < 1e-9);
            prop_assert!((p.alt - (50.0 + 10.0 * v)).abs() < 1e-9);
        }
    }

    #[test]
    fn standardize_then_invert_is_identity(v in prop::array::uniform3(-1e3f64..1e3), sd in prop::array::uniform3(1e-3f64..1e2)) {
        let stats = DatasetStats { mean: [116.0, 40.0, 30.0], std: sd };
        let back = stats.invert(stats.standardize(v));
        for k in 0..3 {
            // A few ulps of the larger of value and mean.
            prop_assert!((back[k] - v[k]).abs() <= 4.0 * f64::EPSILON * (v[k].abs() + stats.mean[k].abs()));
        }
    }
}

#[test]
fn cached_dataset_is_byte_identical_across_runs() {
    let spec = SyntheticSpec { length: 400, min_window: 20, ..Default::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ha = synthetic_dataset(&spec).unwrap().save(a.path()).unwrap();
    let hb = synthetic_dataset(&spec).unwrap().save(b.path()).unwrap();
    assert_eq!(ha, hb);
    let (loaded, manifest) = PreparedDataset::load(a.path()).unwrap();
    assert_eq!(loaded, synthetic_dataset(&spec).unwrap());
    assert_eq!(manifest.stats_digest, loaded.stats.digest());
}
