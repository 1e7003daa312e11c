mod common;

use trajattn::data::{
    batches, build_scenes, decimation_factor, export_scene_highd, lane_change_progress, load_archive, parse_highd,
    parse_highd_from, save_archive, synth_generate, window_count, Batch, BuildConfig, RecordingMeta, Scene,
    SceneArchive, SynthConfig, TrackRow, TrackTable, ARCHIVE_VERSION, LANE_CHANGE_DURATION,
};
use trajattn::Error;

const TRACKS_HEADER: &str = "frame,id,x,y,width,height,xVelocity,laneId";
const META: &str = "id,frameRate,upperLaneMarkings,lowerLaneMarkings\n1,25,1.0;4.5;8.0,30.0;33.5;37.0\n";

fn parse(tracks: &str, meta: &str) -> trajattn::Result<TrackTable> {
    parse_highd_from(tracks.as_bytes(), meta.as_bytes(), ("tracks.csv", "meta.csv"))
}

#[test]
fn parsed_rows_echo_the_written_literals() {
    let t = parse(&format!("{TRACKS_HEADER}\n1,7,10.5,31.25,4.5,1.75,30.0,2\n2,7,11.75,31.5,4.5,1.75,30.0,3\n"), META).unwrap();
    assert_eq!(
        t.rows,
        vec![
            TrackRow { frame: 1, id: 7, x: 10.5, y: 31.25, width: 4.5, height: 1.75, lane_id: 2 },
            TrackRow { frame: 2, id: 7, x: 11.75, y: 31.5, width: 4.5, height: 1.75, lane_id: 3 },
        ]
    );
    assert_eq!(
        t.meta,
        RecordingMeta { frame_rate: 25.0, upper_lane_markings: vec![1.0, 4.5, 8.0], lower_lane_markings: vec![30.0, 33.5, 37.0] }
    );
}

#[test]
fn column_order_and_extra_columns_do_not_matter() {
    let t = parse("laneId,extra,height,width,y,x,id,frame\n2,zz,1.75,4.5,31.25,10.5,7,1\n", META).unwrap();
    assert_eq!(t.rows[0], TrackRow { frame: 1, id: 7, x: 10.5, y: 31.25, width: 4.5, height: 1.75, lane_id: 2 });
}

#[test]
fn missing_columns_are_schema_errors_naming_the_column() {
    match parse("frame,id,y,width,height,laneId\n1,1,2,3,4,5\n", META) {
        Err(Error::Schema { column, file }) => assert_eq!((column.as_str(), file.as_str()), ("x", "tracks.csv")),
        other => panic!("{other:?}"),
    }
    match parse(&format!("{TRACKS_HEADER}\n"), "id,upperLaneMarkings,lowerLaneMarkings\n1,1,2\n") {
        Err(Error::Schema { column, .. }) => assert_eq!(column, "frameRate"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn non_numeric_cells_are_parse_errors_with_the_row_number() {
    let text = format!("{TRACKS_HEADER}\n1,7,10.5,31.25,4.5,1.75,30,2\n2,7,abc,31.5,4.5,1.75,30,2\n");
    match parse(&text, META) {
        Err(Error::Parse { row, msg, .. }) => {
            assert_eq!(row, 3);
            assert!(msg.contains('x'), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn frames_must_increase_per_vehicle() {
    let text = format!("{TRACKS_HEADER}\n2,7,10,31,4,2,30,2\n2,7,11,31,4,2,30,2\n");
    assert!(matches!(parse(&text, META), Err(Error::Parse { row: 3, .. })));
}

#[test]
fn missing_files_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let meta = dir.path().join("meta.csv");
    std::fs::write(&meta, META).unwrap();
    assert!(matches!(parse_highd(&dir.path().join("absent.csv"), &meta), Err(Error::NotFound(_))));
}

#[test]
fn decimation_selects_every_fifth_frame_at_25_hz() {
    assert_eq!(decimation_factor(25.0, 5.0).unwrap(), 5);
    assert_eq!(decimation_factor(5.0, 5.0).unwrap(), 1);
    assert!(matches!(decimation_factor(25.0, 4.0), Err(Error::Config(_))));
    assert!(matches!(decimation_factor(5.0, 10.0), Err(Error::Config(_))));

    // x equals the frame index, so decimated positions expose the kept frames.
    let rows = (0..200).map(|f| row(f, 1, f as f64, 32.0)).collect();
    let table = TrackTable { rows, meta: meta(25.0) };
    let cfg = BuildConfig { stride: 1, ..BuildConfig::default() };
    let (scenes, _) = build_scenes(&table, &cfg).unwrap();
    let s = &scenes[0];
    let xs: Vec<f64> = (0..s.t_obs).map(|t| s.past_at(0, t)[0]).collect();
    let expect: Vec<f64> = (0..s.t_obs).map(|t| (t as f64 - 9.0) * 5.0).collect();
    assert_eq!(xs, expect);
}

#[test]
fn window_count_matches_enumeration() {
    for frames in 0..60 {
        for window in 1..30 {
            for stride in 1..8 {
                let brute = (0..frames).filter(|s| s % stride == 0 && s + window <= frames).count();
                assert_eq!(window_count(frames, window, stride), brute, "{frames} {window} {stride}");
            }
        }
    }
}

/// Lower carriageway with three lanes, upper with one.
fn meta(rate: f64) -> RecordingMeta {
    RecordingMeta { frame_rate: rate, upper_lane_markings: vec![1.0, 4.5], lower_lane_markings: vec![30.0, 33.5, 37.0, 40.5] }
}

/// A 4.5 m × 2 m car whose box center is at `(cx, cy)`.
fn row(frame: i64, id: u64, cx: f64, cy: f64) -> TrackRow {
    TrackRow { frame, id, x: cx - 2.25, y: cy - 1.0, width: 4.5, height: 2.0, lane_id: 2 }
}

#[test]
fn report_counts_windows_and_scenes() {
    for (frames, stride) in [(25usize, 1usize), (40, 3), (100, 5), (24, 1)] {
        let rows = (0..frames as i64).flat_map(|f| [row(f, 1, 6.0 * f as f64, 32.0), row(f, 2, 20.0 + 6.0 * f as f64, 35.5)]).collect();
        let table = TrackTable { rows, meta: meta(5.0) };
        let (scenes, report) = build_scenes(&table, &BuildConfig { stride, ..BuildConfig::default() }).unwrap();
        assert_eq!(report.windows, window_count(frames, 25, stride));
        assert_eq!(report.scenes, 2 * report.windows);
        assert_eq!(scenes.len(), report.scenes);
        assert_eq!(report.skipped_windows, 0);
    }
}

#[test]
fn straight_vehicle_has_zero_lateral_past_and_sits_at_the_origin() {
    for (cy, sign) in [(32.0, 1.0), (2.75, -1.0)] {
        let rows = (0..25).map(|f| row(f, 5, 100.0 + sign * 6.0 * f as f64, cy)).collect();
        let (scenes, _) = build_scenes(&TrackTable { rows, meta: meta(5.0) }, &BuildConfig::default()).unwrap();
        assert_eq!(scenes.len(), 1);
        let s = &scenes[0];
        assert_eq!(s.past_at(0, 9), [0.0, 0.0]);
        for t in 0..10 {
            assert_eq!(s.past_at(0, t)[1], 0.0);
            assert!((s.past_at(0, t)[0] - 6.0 * (t as f64 - 9.0)).abs() < 1e-9);
        }
        for t in 0..15 {
            assert!((s.future_at(0, t)[0] - 6.0 * (t + 1) as f64).abs() < 1e-9);
        }
        for k in 0..s.n_lanes() {
            let [c, l, r] = s.lane(k);
            assert!(l > c && c > r);
        }
    }
}

#[test]
fn left_of_travel_is_positive_lateral_on_both_carriageways() {
    // Lower road drives +x, so smaller image y is to the left; upper road the opposite.
    let lower = vec![row(0, 1, 0.0, 35.5), row(0, 2, 10.0, 32.0)];
    let upper = vec![row(0, 1, 0.0, 2.0), row(0, 2, -10.0, 4.0)];
    for (rows, expect_lat) in [(lower, 3.5), (upper, 2.0)] {
        let rows: Vec<TrackRow> = (0..25)
            .flat_map(|f| rows.iter().map(move |r| TrackRow { frame: f, ..*r }))
            .collect();
        let cfg = BuildConfig { t_obs: 10, t_pred: 15, ..BuildConfig::default() };
        let (scenes, _) = build_scenes(&TrackTable { rows, meta: meta(5.0) }, &cfg).unwrap();
        let s = scenes.iter().find(|s| s.ego_id() == 1).unwrap();
        let other = s.slot_of(2).unwrap();
        assert!((s.past_at(other, 9)[1] - expect_lat).abs() < 1e-9, "{:?}", s.past_at(other, 9));
        assert!(s.past_at(other, 9)[0] > 0.0);
    }
}

#[test]
fn partially_observed_vehicles_are_dropped_and_empty_windows_skipped() {
    let mut rows: Vec<TrackRow> = (0..25).map(|f| row(f, 1, 6.0 * f as f64, 32.0)).collect();
    rows.extend((5..25).map(|f| row(f, 2, 10.0 + 6.0 * f as f64, 35.5)));
    rows.extend((25..50).map(|f| row(f, 3, 6.0 * f as f64, 32.0)).filter(|r| r.frame != 30));
    rows.sort_by_key(|r| (r.frame, r.id));
    let cfg = BuildConfig { stride: 25, ..BuildConfig::default() };
    let (scenes, report) = build_scenes(&TrackTable { rows, meta: meta(5.0) }, &cfg).unwrap();
    assert_eq!(report.windows, 2);
    assert_eq!(report.skipped_windows, 1);
    assert_eq!(scenes.len(), 1);
    assert_eq!(scenes[0].vehicle_ids, vec![1]);
}

#[test]
fn neighbourhood_radius_and_cap_limit_membership() {
    let xs = [0.0, 10.0, -20.0, 45.0, 150.0];
    let rows: Vec<TrackRow> = (0..25)
        .flat_map(|f| xs.iter().enumerate().map(move |(i, x)| row(f, i as u64 + 1, x + 6.0 * f as f64, 32.0)))
        .collect();
    let table = TrackTable { rows, meta: meta(5.0) };
    let (scenes, _) = build_scenes(&table, &BuildConfig { max_vehicles: 3, ..BuildConfig::default() }).unwrap();
    let ego1 = scenes.iter().find(|s| s.ego_id() == 1).unwrap();
    assert_eq!(ego1.vehicle_ids, vec![1, 2, 3]);
    let (scenes, _) = build_scenes(&table, &BuildConfig::default()).unwrap();
    let ego1 = scenes.iter().find(|s| s.ego_id() == 1).unwrap();
    assert_eq!(ego1.vehicle_ids, vec![1, 2, 3, 4]);
    let (scenes, _) = build_scenes(&table, &BuildConfig { ego_stride: 2, ..BuildConfig::default() }).unwrap();
    assert_eq!(scenes.iter().map(|s| s.ego_id()).collect::<Vec<_>>(), vec![1, 3, 5]);
}

#[test]
fn exported_synthetic_scenes_re_parse_to_the_same_positions() {
    let cfg = BuildConfig { stride: 1, radius_lon: 1e6, ..BuildConfig::default() };
    for scene in common::scenes(20, 1, 10, 21) {
        let (mut tracks, mut meta) = (Vec::new(), Vec::new());
        export_scene_highd(&scene, &mut tracks, &mut meta).unwrap();
        let table = parse_highd_from(tracks.as_slice(), meta.as_slice(), ("t", "m")).unwrap();
        let (rebuilt, report) = build_scenes(&table, &cfg).unwrap();
        assert_eq!(report.windows, 1);
        let back = rebuilt.iter().find(|s| s.ego_id() == scene.ego_id()).unwrap();
        assert_eq!(back.vehicle_ids, scene.vehicle_ids);
        for (a, b) in back.past.iter().chain(&back.future).zip(scene.past.iter().chain(&scene.future)) {
            assert!((a - b).abs() < 1e-6, "scene {}: {a} vs {b}", scene.id);
        }
        for (a, b) in back.props.iter().zip(&scene.props) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(back.n_lanes(), scene.n_lanes());
        let sorted = |s: &Scene| {
            let mut v: Vec<[f64; 3]> = (0..s.n_lanes()).map(|k| s.lane(k)).collect();
            v.sort_by(|a, b| a[0].total_cmp(&b[0]));
            v
        };
        for (a, b) in sorted(back).iter().flatten().zip(sorted(&scene).iter().flatten()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn downsampling_and_windowing_commute() {
    let speeds = [25.0, 31.0, 28.5];
    let lanes = [32.0, 35.5, 39.0];
    let mut rows = Vec::new();
    for f in 0..400i64 {
        for (i, (&v, &y)) in speeds.iter().zip(&lanes).enumerate() {
            if i == 2 && !(30..=350).contains(&f) {
                continue;
            }
            let t = f as f64 / 25.0;
            rows.push(row(f, i as u64 + 1, 20.0 * i as f64 + v * t, y + 0.2 * (0.7 * t + i as f64).sin()));
        }
    }
    let full = TrackTable { rows: rows.clone(), meta: meta(25.0) };
    let decimated = TrackTable {
        rows: rows.iter().filter(|r| r.frame % 5 == 0).map(|r| TrackRow { frame: r.frame / 5, ..*r }).collect(),
        meta: meta(5.0),
    };
    for stride in [1, 3, 5] {
        let cfg = BuildConfig { stride, ..BuildConfig::default() };
        let (a, ra) = build_scenes(&full, &cfg).unwrap();
        let (b, rb) = build_scenes(&decimated, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }
}

#[test]
fn synthetic_generation_is_deterministic_per_seed() {
    let cfg = common::synth_cfg(50, 2, 10);
    assert_eq!(synth_generate(&cfg, 3).unwrap(), synth_generate(&cfg, 3).unwrap());
    assert_ne!(synth_generate(&cfg, 3).unwrap(), synth_generate(&cfg, 4).unwrap());
}

#[test]
fn lane_change_fraction_matches_probability() {
    let cfg = SynthConfig { n_scenes: 200, n_vehicles_min: 5, n_vehicles_max: 5, lane_change_prob: 0.5, ..SynthConfig::default() };
    let scenes = synth_generate(&cfg, 9).unwrap();
    let vehicles: usize = scenes.iter().map(|s| s.scene.n_slots()).sum();
    let changes: usize = scenes.iter().map(|s| s.lane_changes.len()).sum();
    assert!(vehicles >= 1000);
    let frac = changes as f64 / vehicles as f64;
    assert!((frac - 0.5).abs() <= 0.05, "{frac}");
}

#[test]
fn without_lane_changes_lateral_futures_stay_within_noise() {
    let cfg = SynthConfig { n_scenes: 100, lane_change_prob: 0.0, ..SynthConfig::default() };
    for s in synth_generate(&cfg, 10).unwrap() {
        assert!(s.lane_changes.is_empty());
        let sc = &s.scene;
        for i in 0..sc.n_slots() {
            let ys: Vec<f64> = (0..sc.t_pred).map(|t| sc.future_at(i, t)[1]).collect();
            let mean = ys.iter().sum::<f64>() / ys.len() as f64;
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
            assert!(var <= 4.0 * cfg.noise_sigma, "{var}");
            assert!(var.sqrt() <= 4.0 * cfg.noise_sigma, "{var}");
        }
    }
}

#[test]
fn lane_change_profile_spans_the_stated_duration() {
    let half = LANE_CHANGE_DURATION / 2.0;
    assert!((lane_change_progress(-half, 0.0) - 0.01).abs() < 1e-12);
    assert!((lane_change_progress(half, 0.0) - 0.99).abs() < 1e-12);
    assert_eq!(lane_change_progress(2.0, 2.0), 0.5);
}

#[test]
fn synthetic_scenes_satisfy_scene_invariants() {
    let cfg = common::synth_cfg(200, 1, 12);
    for s in synth_generate(&cfg, 11).unwrap() {
        let sc = &s.scene;
        sc.validate().unwrap();
        assert_eq!(sc.past_at(sc.ego_index, sc.t_obs - 1), [0.0, 0.0]);
        assert!(sc.past.iter().chain(&sc.future).all(|v| v.is_finite()));
        assert_eq!(sc.future.len(), sc.n_slots() * sc.t_pred * 2);
        assert_eq!(sc.n_lanes(), 3);
        for k in 0..3 {
            let [c, l, r] = sc.lane(k);
            assert!(l > c && c > r);
        }
        for lc in &s.lane_changes {
            assert_eq!(lc.from_lane.abs_diff(lc.to_lane), 1);
            assert!((0.0..=cfg.change_mid_max).contains(&lc.t_mid));
        }
    }
}

#[test]
fn out_of_range_synthetic_parameters_are_rejected() {
    let bad = [
        SynthConfig { n_lanes: 1, ..SynthConfig::default() },
        SynthConfig { n_scenes: 0, ..SynthConfig::default() },
        SynthConfig { lane_change_prob: 1.5, ..SynthConfig::default() },
        SynthConfig { noise_sigma: -0.1, ..SynthConfig::default() },
        SynthConfig { n_vehicles_min: 5, n_vehicles_max: 4, ..SynthConfig::default() },
        SynthConfig { speed_min: 0.0, ..SynthConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(synth_generate(&cfg, 0), Err(Error::Parameter(_))), "{cfg:?}");
    }
}

fn with_n(n: usize, seed: u64) -> Scene {
    common::scenes(1, n, n, seed).remove(0)
}

#[test]
fn batches_pad_to_the_largest_scene() {
    let (a, b) = (with_n(3, 1), with_n(7, 2));
    let batch = Batch::from_scenes(&[&a, &b], true).unwrap();
    assert_eq!(batch.n, 7);
    assert_eq!(batch.m, 3);
    let sums: Vec<usize> = batch.vehicle_valid.chunks(7).map(|c| c.iter().filter(|&&v| v).count()).collect();
    assert_eq!(sums, vec![3, 7]);
    assert_eq!(batch.slots, vec![(3, 3), (7, 3)]);
    let pad = &batch.past[3 * 20..7 * 20];
    assert!(pad.iter().all(|&v| v == 0.0));
    let no_ego = Batch::from_scenes(&[&a, &b], false).unwrap();
    assert_eq!(no_ego.target_valid.iter().filter(|&&v| v).count(), 8);
    assert_eq!(no_ego.vehicle_valid, batch.vehicle_valid);
}

#[test]
fn unshuffled_batches_keep_input_order() {
    let scenes = common::scenes(23, 2, 5, 3);
    let ids: Vec<u64> = batches(&scenes, 5, None, true).unwrap().flat_map(|b| b.unwrap().scene_ids).collect();
    assert_eq!(ids, scenes.iter().map(|s| s.id).collect::<Vec<_>>());
    let sizes: Vec<usize> = batches(&scenes, 5, None, true).unwrap().map(|b| b.unwrap().size()).collect();
    assert_eq!(sizes, vec![5, 5, 5, 5, 3]);
}

#[test]
fn shuffled_order_is_fixed_by_seed() {
    let scenes = common::scenes(40, 2, 3, 4);
    let order = |seed| batches(&scenes, 8, Some(seed), true).unwrap().order().to_vec();
    assert_eq!(order(1), order(1));
    assert_ne!(order(1), order(2));
    let mut sorted = order(1);
    sorted.sort_unstable();
    assert_eq!(sorted, (0..40).collect::<Vec<_>>());
}

#[test]
fn empty_scene_sets_cannot_be_batched() {
    assert!(matches!(batches(&[], 4, None, true), Err(Error::Parameter(_))));
    assert!(matches!(Batch::from_scenes(&[], true), Err(Error::Parameter(_))));
}

#[test]
fn archives_round_trip_and_reject_damage() {
    let archive = SceneArchive { scenes: common::scenes(30, 1, 9, 5), provenance: "seed = 5\n".into() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.atrs");
    save_archive(&archive, &path).unwrap();
    assert_eq!(load_archive(&path).unwrap(), archive);

    let bytes = archive.to_bytes();
    for cut in [2, 8, 40, bytes.len() - 3] {
        assert!(matches!(SceneArchive::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))));
    }
    let mut v = bytes.clone();
    v[4..8].copy_from_slice(&(ARCHIVE_VERSION + 1).to_le_bytes());
    assert!(matches!(SceneArchive::from_bytes(&v), Err(Error::UnsupportedVersion { .. })));

    let mut broken = archive.clone();
    broken.scenes[0].past[0] = f64::NAN;
    assert!(matches!(SceneArchive::from_bytes(&broken.to_bytes()), Err(Error::Corrupt(_))));
    assert!(matches!(load_archive(&dir.path().join("none")), Err(Error::NotFound(_))));
}
