//! External prediction files and the method-comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use super::metrics::{target_mask, RmseReport};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::model::GaussianForecast;

pub const PREDICTION_COLUMNS: [&str; 5] = ["scene_id", "vehicle_id", "t_index", "mu_x", "mu_y"];

/// Writes the means of every scored vehicle as `scene_id, vehicle_id,
/// t_index, mu_x, mu_y` rows.
pub fn write_predictions<W: Write>(out: W, forecasts: &[GaussianForecast], scenes: &[Scene], predict_ego: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PREDICTION_COLUMNS)?;
    for (f, s) in forecasts.iter().zip(scenes) {
        let mask = target_mask(s, predict_ego);
        for i in (0..s.n_slots()).filter(|&i| mask[i]) {
            for t in 0..f.t_pred {
                let [x, y] = f.mean(i, t);
                w.write_record([
                    s.id.to_string(),
                    s.vehicle_ids[i].to_string(),
                    t.to_string(),
                    format!("{x:?}"),
                    format!("{y:?}"),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a prediction file into per-scene mean arrays `[N, t_pred, 2]`
/// aligned with `scenes`. Every scored vehicle-step must be present.
pub fn read_predictions<R: Read>(input: R, scenes: &[Scene], predict_ego: bool, name: &str) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = PREDICTION_COLUMNS
        .iter()
        .map(|&c| {
            headers
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::Schema { column: c.to_string(), file: name.to_string() })
        })
        .collect::<Result<_>>()?;
    let mut values: BTreeMap<(u64, u64, usize), [f64; 2]> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 2;
        let field = |i: usize| rec.get(cols[i]).unwrap_or("").trim().to_string();
        let parse_err = |i: usize| Error::Parse {
            file: name.to_string(),
            row,
            msg: format!("column `{}`: `{}` is not a number", PREDICTION_COLUMNS[i], field(i)),
        };
        let sid: u64 = field(0).parse().map_err(|_| parse_err(0))?;
        let vid: u64 = field(1).parse().map_err(|_| parse_err(1))?;
        let t: usize = field(2).parse().map_err(|_| parse_err(2))?;
        let x: f64 = field(3).parse().map_err(|_| parse_err(3))?;
        let y: f64 = field(4).parse().map_err(|_| parse_err(4))?;
        if values.insert((sid, vid, t), [x, y]).is_some() {
            return Err(Error::Parse { file: name.to_string(), row, msg: format!("duplicate entry ({sid}, {vid}, {t})") });
        }
    }
    scenes
        .iter()
        .map(|s| {
            let mask = target_mask(s, predict_ego);
            let mut mu = vec![0.0; s.n_slots() * s.t_pred * 2];
            for i in (0..s.n_slots()).filter(|&i| mask[i]) {
                for t in 0..s.t_pred {
                    let key = (s.id, s.vehicle_ids[i], t);
                    let p = values
                        .get(&key)
                        .ok_or_else(|| Error::NotFound(format!("prediction for scene {} vehicle {} step {t}", key.0, key.1)))?;
                    let o = (i * s.t_pred + t) * 2;
                    mu[o..o + 2].copy_from_slice(p);
                }
            }
            Ok(mu)
        })
        .collect()
}

/// Methods as rows, horizon × axis as columns.
pub fn comparison_table(methods: &[(String, RmseReport)]) -> String {
    let mut s = String::new();
    let Some((_, first)) = methods.first() else {
        return s;
    };
    let width = methods.iter().map(|(m, _)| m.len()).max().unwrap_or(6).max(6);
    write!(s, "{:<width$}", "method").unwrap();
    for axis in ["long", "lat"] {
        for r in &first.rows {
            write!(s, " | {:>9}", format!("{axis} {}s", r.horizon_s)).unwrap();
        }
    }
    s.push('\n');
    s.push_str(&"-".repeat(width + first.rows.len() * 2 * 12));
    s.push('\n');
    for (name, report) in methods {
        write!(s, "{name:<width$}").unwrap();
        for r in &report.rows {
            write!(s, " | {:>9.3}", r.longitudinal).unwrap();
        }
        for r in &report.rows {
            write!(s, " | {:>9.3}", r.lateral).unwrap();
        }
        s.push('\n');
    }
    s.push_str("(RMSE in meters)\n");
    s
}
