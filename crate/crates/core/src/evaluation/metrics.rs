//! Horizon RMSE and 3σ-ellipse calibration.

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::model::{mahalanobis2, GaussianForecast};

/// Prediction lead times reported by default, seconds.
pub const HORIZONS_S: [f64; 3] = [1.0, 2.0, 3.0];
/// Squared Mahalanobis radius of the 3σ ellipse.
pub const THREE_SIGMA_Q: f64 = 9.0;

/// Future-step index of each horizon: `round(h / dt) - 1`. Fails unless
/// every horizon lies on the grid and inside the prediction window.
pub fn horizon_indices(dt: f64, t_pred: usize, horizons: &[f64]) -> Result<Vec<usize>> {
    horizons
        .iter()
        .map(|&h| {
            let steps = h / dt;
            let k = steps.round();
            if !(dt > 0.0) || (steps - k).abs() > 1e-6 || k < 1.0 {
                return Err(Error::Config(format!("horizon {h} s is not on the {dt} s grid")));
            }
            let idx = k as usize - 1;
            if idx >= t_pred {
                return Err(Error::Config(format!(
                    "horizon {h} s needs {} future steps but only {t_pred} are predicted",
                    idx + 1
                )));
            }
            Ok(idx)
        })
        .collect()
}

/// Which slots of `scene` count toward metrics.
pub fn target_mask(scene: &Scene, predict_ego: bool) -> Vec<bool> {
    (0..scene.n_slots())
        .map(|i| scene.vehicle_mask[i] && (predict_ego || i != scene.ego_index))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonRmse {
    pub horizon_s: f64,
    pub longitudinal: f64,
    pub lateral: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmseReport {
    pub rows: Vec<HorizonRmse>,
}

impl RmseReport {
    pub fn at(&self, horizon_s: f64) -> Option<&HorizonRmse> {
        self.rows.iter().find(|r| (r.horizon_s - horizon_s).abs() < 1e-9)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon_s,rmse_long_m,rmse_lat_m,count\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:?},{:?},{}\n", r.horizon_s, r.longitudinal, r.lateral, r.count));
        }
        out
    }
}

/// One scene's predicted means, truth and metric mask, all `[N, t_pred, 2]`.
#[derive(Clone, Copy, Debug)]
pub struct SceneTrajectories<'a> {
    pub predicted: &'a [f64],
    pub truth: &'a [f64],
    pub mask: &'a [bool],
}

/// Axis-separated RMSE over every unmasked vehicle at each horizon.
pub fn rmse(items: &[SceneTrajectories<'_>], t_pred: usize, dt: f64, horizons: &[f64]) -> Result<RmseReport> {
    let idx = horizon_indices(dt, t_pred, horizons)?;
    let mut sums = vec![[0.0f64; 2]; idx.len()];
    let mut counts = vec![0usize; idx.len()];
    for it in items {
        let n = it.mask.len();
        if it.predicted.len() != n * t_pred * 2 || it.truth.len() != n * t_pred * 2 {
            return Err(Error::Dimension(format!(
                "prediction {} / truth {} values for {n} vehicles × {t_pred} steps",
                it.predicted.len(),
                it.truth.len()
            )));
        }
        for i in (0..n).filter(|&i| it.mask[i]) {
            for (h, &t) in idx.iter().enumerate() {
                let o = (i * t_pred + t) * 2;
                for axis in 0..2 {
                    let e = it.predicted[o + axis] - it.truth[o + axis];
                    sums[h][axis] += e * e;
                }
                counts[h] += 1;
            }
        }
    }
    let rows = horizons
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(&h, (s, &c))| {
            let root = |v: f64| if c == 0 { 0.0 } else { (v / c as f64).sqrt() };
            HorizonRmse { horizon_s: h, longitudinal: root(s[0]), lateral: root(s[1]), count: c }
        })
        .collect();
    Ok(RmseReport { rows })
}

/// RMSE of forecasts against scene futures.
pub fn rmse_of_forecasts(forecasts: &[GaussianForecast], scenes: &[Scene], predict_ego: bool, horizons: &[f64]) -> Result<RmseReport> {
    check_pairing(forecasts, scenes)?;
    let masks: Vec<Vec<bool>> = scenes.iter().map(|s| target_mask(s, predict_ego)).collect();
    let items: Vec<SceneTrajectories<'_>> = forecasts
        .iter()
        .zip(scenes)
        .zip(&masks)
        .map(|((f, s), m)| SceneTrajectories { predicted: &f.mu, truth: &s.future, mask: m })
        .collect();
    let first = scenes.first().ok_or_else(|| Error::Parameter("no scenes to evaluate".into()))?;
    rmse(&items, first.t_pred, first.dt, horizons)
}

fn check_pairing(forecasts: &[GaussianForecast], scenes: &[Scene]) -> Result<()> {
    if forecasts.len() != scenes.len() {
        return Err(Error::Dimension(format!("{} forecasts for {} scenes", forecasts.len(), scenes.len())));
    }
    for (f, s) in forecasts.iter().zip(scenes) {
        if f.n != s.n_slots() || f.t_pred != s.t_pred {
            return Err(Error::Dimension(format!(
                "forecast {}×{} does not fit scene {} ({}×{})",
                f.n,
                f.t_pred,
                s.id,
                s.n_slots(),
                s.t_pred
            )));
        }
    }
    Ok(())
}

/// Whether `y` lies inside (or on) the 3σ ellipse of `N(μ, Σ)`.
pub fn inside_three_sigma(mu: [f64; 2], sigma: [f64; 3], y: [f64; 2]) -> bool {
    mahalanobis2(mu, sigma, y) <= THREE_SIGMA_Q
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonCoverage {
    pub horizon_s: f64,
    pub inside: usize,
    pub count: usize,
}

impl HorizonCoverage {
    pub fn fraction(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.inside as f64 / self.count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub rows: Vec<HorizonCoverage>,
}

impl CalibrationReport {
    pub fn min_fraction(&self) -> f64 {
        self.rows.iter().map(HorizonCoverage::fraction).fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon_s,coverage_3sigma,inside,count\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:?},{},{}\n", r.horizon_s, r.fraction(), r.inside, r.count));
        }
        out
    }
}

/// Fraction of ground-truth points inside the predicted 3σ ellipse per horizon.
pub fn calibration(forecasts: &[GaussianForecast], scenes: &[Scene], predict_ego: bool, horizons: &[f64]) -> Result<CalibrationReport> {
    check_pairing(forecasts, scenes)?;
    let first = scenes.first().ok_or_else(|| Error::Parameter("no scenes to evaluate".into()))?;
    let idx = horizon_indices(first.dt, first.t_pred, horizons)?;
    let mut rows: Vec<HorizonCoverage> =
        horizons.iter().map(|&h| HorizonCoverage { horizon_s: h, inside: 0, count: 0 }).collect();
    for (f, s) in forecasts.iter().zip(scenes) {
        let mask = target_mask(s, predict_ego);
        for i in (0..s.n_slots()).filter(|&i| mask[i]) {
            for (row, &t) in rows.iter_mut().zip(&idx) {
                row.count += 1;
                if inside_three_sigma(f.mean(i, t), f.cov(i, t), s.future_at(i, t)) {
                    row.inside += 1;
                }
            }
        }
    }
    Ok(CalibrationReport { rows })
}
