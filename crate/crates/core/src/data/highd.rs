//! highD-format track ingestion and scene construction.
//!
//! Positions in highD are bounding-box top-left corners in an image-aligned
//! road frame (x right, y down). The upper carriageway drives towards -x.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::scene::{Scene, LANE_FEATURES, VEHICLE_PROPS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackRow {
    pub frame: i64,
    pub id: u64,
    pub x: f64,
    pub y: f64,
    /// Along-road extent of the bounding box (vehicle length).
    pub width: f64,
    /// Across-road extent of the bounding box (vehicle width).
    pub height: f64,
    pub lane_id: i64,
}

impl TrackRow {
    pub fn center(&self) -> [f64; 2] {
        [self.x + self.width / 2.0, self.y + self.height / 2.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordingMeta {
    pub frame_rate: f64,
    pub upper_lane_markings: Vec<f64>,
    pub lower_lane_markings: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackTable {
    pub rows: Vec<TrackRow>,
    pub meta: RecordingMeta,
}

const TRACK_COLUMNS: [&str; 7] = ["frame", "id", "x", "y", "width", "height", "laneId"];
const META_COLUMNS: [&str; 3] = ["frameRate", "upperLaneMarkings", "lowerLaneMarkings"];

fn column_indices(headers: &csv::StringRecord, wanted: &[&str], file: &str) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|&name| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Schema { column: name.to_string(), file: file.to_string() })
        })
        .collect()
}

fn cell<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, column: &str, file: &str, row: usize) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| Error::Parse {
        file: file.to_string(),
        row,
        msg: format!("column `{column}`: `{raw}` is not a number"),
    })
}

fn parse_markings(raw: &str, file: &str, row: usize, column: &str) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = raw
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|_| Error::Parse {
                file: file.to_string(),
                row,
                msg: format!("column `{column}`: `{s}` is not a number"),
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Parses a tracks CSV and a recording-metadata CSV from readers. `names`
/// label the two sources in error messages. Row numbers count file lines
/// from 1, the header being line 1.
pub fn parse_highd_from<R1: Read, R2: Read>(tracks: R1, meta: R2, names: (&str, &str)) -> Result<TrackTable> {
    let (tracks_name, meta_name) = names;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(tracks);
    let cols = column_indices(rdr.headers()?, &TRACK_COLUMNS, tracks_name)?;
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let f = |i: usize| cell::<f64>(&rec, cols[i], TRACK_COLUMNS[i], tracks_name, line);
        let row = TrackRow {
            frame: cell(&rec, cols[0], "frame", tracks_name, line)?,
            id: cell(&rec, cols[1], "id", tracks_name, line)?,
            x: f(2)?,
            y: f(3)?,
            width: f(4)?,
            height: f(5)?,
            lane_id: cell(&rec, cols[6], "laneId", tracks_name, line)?,
        };
        if ![row.x, row.y, row.width, row.height].iter().all(|v| v.is_finite()) {
            return Err(Error::Parse { file: tracks_name.into(), row: line, msg: "non-finite value".into() });
        }
        rows.push(row);
    }

    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(meta);
    let cols = column_indices(rdr.headers()?, &META_COLUMNS, meta_name)?;
    let rec = rdr
        .records()
        .next()
        .ok_or_else(|| Error::Parse { file: meta_name.into(), row: 2, msg: "metadata has no data row".into() })??;
    let frame_rate: f64 = cell(&rec, cols[0], "frameRate", meta_name, 2)?;
    if !(frame_rate > 0.0 && frame_rate.is_finite()) {
        return Err(Error::Parse { file: meta_name.into(), row: 2, msg: format!("frameRate {frame_rate} must be positive") });
    }
    let meta = RecordingMeta {
        frame_rate,
        upper_lane_markings: parse_markings(rec.get(cols[1]).unwrap_or(""), meta_name, 2, "upperLaneMarkings")?,
        lower_lane_markings: parse_markings(rec.get(cols[2]).unwrap_or(""), meta_name, 2, "lowerLaneMarkings")?,
    };

    let mut last: BTreeMap<u64, i64> = BTreeMap::new();
    for (k, r) in rows.iter().enumerate() {
        if let Some(prev) = last.insert(r.id, r.frame) {
            if r.frame <= prev {
                return Err(Error::Parse {
                    file: tracks_name.into(),
                    row: k + 2,
                    msg: format!("frames of vehicle {} are not strictly increasing", r.id),
                });
            }
        }
    }
    Ok(TrackTable { rows, meta })
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("file {}", path.display())),
        _ => Error::Io(e),
    })
}

pub fn parse_highd(tracks_csv: &Path, meta_csv: &Path) -> Result<TrackTable> {
    let names = (tracks_csv.display().to_string(), meta_csv.display().to_string());
    parse_highd_from(open(tracks_csv)?, open(meta_csv)?, (&names.0, &names.1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    /// Window start spacing, in downsampled frames.
    pub stride: usize,
    pub target_rate_hz: f64,
    /// Longitudinal neighbourhood radius around the ego, meters.
    pub radius_lon: f64,
    pub max_vehicles: usize,
    /// Every `ego_stride`-th eligible vehicle of a window (by id) becomes an ego.
    pub ego_stride: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { t_obs: 10, t_pred: 15, stride: 5, target_rate_hz: 5.0, radius_lon: 100.0, max_vehicles: 30, ego_stride: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildReport {
    pub windows: usize,
    /// Windows without any vehicle observed over the whole window.
    pub skipped_windows: usize,
    pub scenes: usize,
}

/// Integer frame decimation factor from recording to target rate.
pub fn decimation_factor(frame_rate: f64, target_rate_hz: f64) -> Result<usize> {
    let ratio = frame_rate / target_rate_hz;
    let k = ratio.round();
    if !(target_rate_hz > 0.0) || k < 1.0 || (ratio - k).abs() > 1e-9 {
        return Err(Error::Config(format!("target rate {target_rate_hz} Hz does not divide the recording rate {frame_rate} Hz")));
    }
    Ok(k as usize)
}

/// Number of windows of `window` frames at `stride` over `frames` frames.
pub fn window_count(frames: usize, window: usize, stride: usize) -> usize {
    if frames < window || stride == 0 {
        0
    } else {
        (frames - window) / stride + 1
    }
}

/// +1 for the lower carriageway (driving towards +x), -1 for the upper one.
fn direction(meta: &RecordingMeta, center_y: f64) -> f64 {
    match (meta.upper_lane_markings.last(), meta.lower_lane_markings.first()) {
        (Some(&u), Some(&l)) => {
            if center_y < 0.5 * (u + l) {
                -1.0
            } else {
                1.0
            }
        }
        (Some(_), None) => -1.0,
        _ => 1.0,
    }
}

/// Slides a window over the decimated recording and emits one scene per
/// selected ego. A vehicle enters a scene only if present in every frame of
/// the window and on the ego's carriageway.
pub fn build_scenes(table: &TrackTable, cfg: &BuildConfig) -> Result<(Vec<Scene>, BuildReport)> {
    if cfg.t_obs < 2 || cfg.t_pred == 0 || cfg.stride == 0 || cfg.ego_stride == 0 || cfg.max_vehicles == 0 {
        return Err(Error::Config(format!("invalid scene construction settings {cfg:?}")));
    }
    let factor = decimation_factor(table.meta.frame_rate, cfg.target_rate_hz)? as i64;
    let window = cfg.t_obs + cfg.t_pred;
    let mut report = BuildReport::default();
    let kept: Vec<&TrackRow> = table.rows.iter().filter(|r| r.frame.rem_euclid(factor) == 0).collect();
    let (Some(first), Some(last)) = (kept.iter().map(|r| r.frame).min(), kept.iter().map(|r| r.frame).max()) else {
        return Ok((Vec::new(), report));
    };
    let n_frames = ((last - first) / factor) as usize + 1;
    let mut by_frame: Vec<BTreeMap<u64, &TrackRow>> = vec![BTreeMap::new(); n_frames];
    for r in kept {
        by_frame[((r.frame - first) / factor) as usize].insert(r.id, r);
    }
    let lanes_of = |d: f64| -> &Vec<f64> {
        if d < 0.0 {
            &table.meta.upper_lane_markings
        } else {
            &table.meta.lower_lane_markings
        }
    };

    let mut scenes = Vec::new();
    report.windows = window_count(n_frames, window, cfg.stride);
    for w in 0..report.windows {
        let start = w * cfg.stride;
        let frames = &by_frame[start..start + window];
        let full: Vec<u64> = frames[0].keys().copied().filter(|id| frames.iter().all(|f| f.contains_key(id))).collect();
        if full.is_empty() {
            report.skipped_windows += 1;
            continue;
        }
        let obs_last = &frames[cfg.t_obs - 1];
        for &ego in full.iter().step_by(cfg.ego_stride) {
            let ego_c = obs_last[&ego].center();
            let d = direction(&table.meta, ego_c[1]);
            let to_ego = |c: [f64; 2]| [d * (c[0] - ego_c[0]), -d * (c[1] - ego_c[1])];
            let mut members: Vec<(f64, u64)> = full
                .iter()
                .filter_map(|&id| {
                    let c = obs_last[&id].center();
                    let lon = to_ego(c)[0];
                    (direction(&table.meta, c[1]) == d && lon.abs() <= cfg.radius_lon).then_some((lon.abs(), id))
                })
                .collect();
            members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            members.truncate(cfg.max_vehicles);
            let mut ids: Vec<u64> = members.into_iter().map(|(_, id)| id).collect();
            ids.sort_unstable();
            let n = ids.len();
            let mut past = Vec::with_capacity(n * cfg.t_obs * 2);
            let mut future = Vec::with_capacity(n * cfg.t_pred * 2);
            let mut props = Vec::with_capacity(n * VEHICLE_PROPS);
            for &id in &ids {
                for (j, f) in frames.iter().enumerate() {
                    let p = if id == ego && j == cfg.t_obs - 1 { [0.0, 0.0] } else { to_ego(f[&id].center()) };
                    if j < cfg.t_obs { &mut past } else { &mut future }.extend_from_slice(&p);
                }
                let r = obs_last[&id];
                props.extend_from_slice(&[r.width, r.height]);
            }
            let marks = lanes_of(d);
            let mut lanes = Vec::with_capacity(marks.len().saturating_sub(1) * LANE_FEATURES);
            for pair in marks.windows(2) {
                let a = -d * (pair[0] - ego_c[1]);
                let b = -d * (pair[1] - ego_c[1]);
                lanes.extend_from_slice(&[0.5 * (a + b), a.max(b), a.min(b)]);
            }
            if lanes.is_empty() {
                return Err(Error::Config("recording has no lane between two markings on the ego carriageway".into()));
            }
            let n_lanes = lanes.len() / LANE_FEATURES;
            let scene = Scene {
                id: ((w as u64) << 32) | (ego & 0xFFFF_FFFF),
                ego_index: ids.iter().position(|&i| i == ego).expect("ego is a member"),
                dt: 1.0 / cfg.target_rate_hz,
                t_obs: cfg.t_obs,
                t_pred: cfg.t_pred,
                vehicle_ids: ids,
                past,
                props,
                future,
                vehicle_mask: vec![true; n],
                lanes,
                lane_mask: vec![true; n_lanes],
            };
            scene.validate()?;
            scenes.push(scene);
        }
    }
    report.scenes = scenes.len();
    Ok((scenes, report))
}

/// Writes one scene as a highD recording on the lower carriageway: frame
/// rate `1/dt`, frames `0..t_obs+t_pred`, the ego's last observed center
/// placed at a fixed road position. Masked slots are omitted.
pub fn export_scene_highd<W1: Write, W2: Write>(scene: &Scene, tracks: W1, meta: W2) -> Result<()> {
    const ORIGIN: [f64; 2] = [200.0, 40.0];
    let mut w = csv::Writer::from_writer(tracks);
    w.write_record(["frame", "id", "x", "y", "width", "height", "laneId"])?;
    let steps = scene.t_obs + scene.t_pred;
    for j in 0..steps {
        for i in (0..scene.n_slots()).filter(|&i| scene.vehicle_mask[i]) {
            let p = if j < scene.t_obs { scene.past_at(i, j) } else { scene.future_at(i, j - scene.t_obs) };
            let (len, wid) = (scene.props[i * VEHICLE_PROPS], scene.props[i * VEHICLE_PROPS + 1]);
            let cx = ORIGIN[0] + p[0];
            let cy = ORIGIN[1] - p[1];
            w.write_record([
                j.to_string(),
                scene.vehicle_ids[i].to_string(),
                format!("{:?}", cx - len / 2.0),
                format!("{:?}", cy - wid / 2.0),
                format!("{len:?}"),
                format!("{wid:?}"),
                "0".to_string(),
            ])?;
        }
    }
    w.flush()?;
    let mut marks: Vec<f64> = (0..scene.n_lanes())
        .filter(|&k| scene.lane_mask[k])
        .flat_map(|k| {
            let [_, left, right] = scene.lane(k);
            [ORIGIN[1] - left, ORIGIN[1] - right]
        })
        .collect();
    marks.sort_by(f64::total_cmp);
    marks.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let join = |v: &[f64]| v.iter().map(|m| format!("{m:?}")).collect::<Vec<_>>().join(";");
    let mut w = csv::Writer::from_writer(meta);
    w.write_record(["id", "frameRate", "upperLaneMarkings", "lowerLaneMarkings"])?;
    w.write_record(["1".to_string(), format!("{:?}", 1.0 / scene.dt), join(&[1.0, 4.5]), join(&marks)])?;
    w.flush()?;
    Ok(())
}
