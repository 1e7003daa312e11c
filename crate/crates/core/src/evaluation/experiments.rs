//! Density sweep, latency benchmark and the lane-change attention statistic.

use std::time::Instant;

use super::metrics::{rmse_of_forecasts, target_mask, RmseReport, HORIZONS_S};
use crate::attention::LayerTag;
use crate::data::{Scene, SyntheticScene};
use crate::error::{Error, Result};
use crate::model::{GaussianForecast, Model};

/// Mean of `trace(Σ)` over every scored vehicle and future step.
pub fn mean_covariance_trace(forecasts: &[GaussianForecast], scenes: &[Scene], predict_ego: bool) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (f, s) in forecasts.iter().zip(scenes) {
        let mask = target_mask(s, predict_ego);
        for i in (0..f.n).filter(|&i| mask[i]) {
            for t in 0..f.t_pred {
                sum += f.trace(i, t);
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityRow {
    /// Vehicles per scene, ego included.
    pub n: usize,
    pub scenes: usize,
    pub rmse: RmseReport,
    pub mean_trace: f64,
}

/// Accuracy and predicted uncertainty of one model on scene sets of
/// different vehicle counts.
pub fn scalability_experiment(model: &Model, sets: &[(usize, Vec<Scene>)], predict_ego: bool) -> Result<Vec<DensityRow>> {
    sets.iter()
        .map(|(n, scenes)| {
            let forecasts = model.predict(scenes)?;
            Ok(DensityRow {
                n: *n,
                scenes: scenes.len(),
                rmse: rmse_of_forecasts(&forecasts, scenes, predict_ego, &HORIZONS_S)?,
                mean_trace: mean_covariance_trace(&forecasts, scenes, predict_ego),
            })
        })
        .collect()
}

pub fn density_csv(rows: &[DensityRow]) -> String {
    let mut out = String::from("n_vehicles,scenes,horizon_s,rmse_long_m,rmse_lat_m,mean_cov_trace_m2\n");
    for r in rows {
        for h in &r.rmse.rows {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?}\n",
                r.n, r.scenes, h.horizon_s, h.longitudinal, h.lateral, r.mean_trace
            ));
        }
    }
    out
}

/// Forward passes timed before any sample is recorded.
pub const LATENCY_WARMUP: usize = 10;
/// Reference mean forward time from the original method description.
pub const REFERENCE_LATENCY_MS: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub n_vehicles: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Wall-clock time of eval-mode forwards of `scene`.
pub fn latency_benchmark(model: &Model, scene: &Scene, repeats: usize) -> Result<LatencyReport> {
    if repeats == 0 {
        return Err(Error::Parameter("repeats must be positive".into()));
    }
    for _ in 0..LATENCY_WARMUP {
        model.forward(scene)?;
    }
    let mut samples_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = model.forward(scene)?;
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        n_vehicles: scene.n_valid(),
        mean_ms: samples_ms.iter().sum::<f64>() / repeats as f64,
        median_ms: percentile(&sorted, 50.0),
        p95_ms: percentile(&sorted, 95.0),
        samples_ms,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaneChangeAttention {
    /// Lane-changing vehicles with at least one peer in the target lane.
    pub cases: usize,
    /// Cases whose strongest off-self attention falls on a target-lane vehicle.
    pub hits: usize,
    /// Expected hit count if the strongest peer were drawn uniformly.
    pub chance: f64,
}

impl LaneChangeAttention {
    pub fn hit_rate(&self) -> f64 {
        if self.cases == 0 {
            f64::NAN
        } else {
            self.hits as f64 / self.cases as f64
        }
    }

    pub fn chance_rate(&self) -> f64 {
        if self.cases == 0 {
            f64::NAN
        } else {
            self.chance / self.cases as f64
        }
    }
}

/// For every lane change whose midpoint lies within `window_s` seconds of
/// the last observed step, checks whether the head-averaged vehicle-encoder
/// attention of the changing vehicle peaks (excluding itself) on a vehicle
/// occupying the target lane.
pub fn lane_change_attention(model: &Model, scenes: &[SyntheticScene], window_s: f64) -> Result<LaneChangeAttention> {
    let mut stat = LaneChangeAttention { cases: 0, hits: 0, chance: 0.0 };
    for s in scenes {
        let relevant: Vec<_> = s.lane_changes.iter().filter(|c| c.t_mid.abs() <= window_s).collect();
        if relevant.is_empty() {
            continue;
        }
        let (_, records) = model.forward(&s.scene)?;
        let rec = records
            .iter()
            .find(|r| r.layer == LayerTag::VehicleEncoder)
            .ok_or_else(|| Error::Invariant("vehicle-encoder record missing".into()))?;
        for c in relevant {
            let i = s.scene.slot_of(c.vehicle_id).expect("changing vehicle is in its scene");
            let others: Vec<usize> = (0..s.scene.n_slots()).filter(|&j| j != i && s.scene.vehicle_mask[j]).collect();
            let in_target = others.iter().filter(|&&j| s.lane_at_last_obs[j] == c.to_lane).count();
            if in_target == 0 {
                continue;
            }
            let mean_row: Vec<f64> = (0..rec.n_keys())
                .map(|k| (0..rec.heads.len()).map(|h| rec.row(h, i)[k]).sum::<f64>() / rec.heads.len() as f64)
                .collect();
            let best = others
                .iter()
                .copied()
                .max_by(|&a, &b| mean_row[a].total_cmp(&mean_row[b]).then(b.cmp(&a)))
                .expect("at least one peer");
            stat.cases += 1;
            stat.chance += in_target as f64 / others.len() as f64;
            if s.lane_at_last_obs[best] == c.to_lane {
                stat.hits += 1;
            }
        }
    }
    Ok(stat)
}

/// Draws `draws_per_step` samples from every Gaussian of every forecast and
/// counts how many land inside their own 3σ ellipse. Returns `(inside, total)`.
pub fn self_sampled_coverage(forecasts: &[GaussianForecast], draws_per_step: usize, seed: u64) -> (usize, usize) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut inside, mut total) = (0, 0);
    for f in forecasts {
        for i in 0..f.n {
            for t in 0..f.t_pred {
                let mu = f.mean(i, t);
                let s = f.cov(i, t);
                let l11 = s[0].sqrt();
                let l21 = s[1] / l11;
                let l22 = (s[2] - l21 * l21).sqrt();
                for _ in 0..draws_per_step {
                    let z1: f64 = StandardNormal.sample(&mut rng);
                    let z2: f64 = StandardNormal.sample(&mut rng);
                    let y = [mu[0] + l11 * z1, mu[1] + l21 * z1 + l22 * z2];
                    if super::metrics::inside_three_sigma(mu, s, y) {
                        inside += 1;
                    }
                    total += 1;
                }
            }
        }
    }
    (inside, total)
}
