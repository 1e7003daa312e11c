//! Synthetic straight-highway scenes with optional logistic lane changes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scene::{Scene, LANE_FEATURES, VEHICLE_PROPS};
use crate::error::{Error, Result};

pub const LANE_WIDTH: f64 = 3.5;
/// Seconds a lane change takes to go from 1 % to 99 % of the offset.
pub const LANE_CHANGE_DURATION: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_scenes: usize,
    /// Inclusive range of vehicles per scene, ego included.
    pub n_vehicles_min: usize,
    pub n_vehicles_max: usize,
    pub n_lanes: usize,
    pub lane_change_prob: f64,
    /// Meters, i.i.d. on every observed and future coordinate.
    pub noise_sigma: f64,
    pub dt: f64,
    pub t_obs: usize,
    pub t_pred: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Other vehicles start within this longitudinal distance of the ego.
    pub range_lon: f64,
    /// Lane-change midpoints are drawn uniformly from `[0, this]` seconds
    /// after the last observed step.
    pub change_mid_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 2000,
            n_vehicles_min: 2,
            n_vehicles_max: 10,
            n_lanes: 3,
            lane_change_prob: 0.3,
            noise_sigma: 0.05,
            dt: 0.2,
            t_obs: 10,
            t_pred: 15,
            speed_min: 20.0,
            speed_max: 35.0,
            range_lon: 90.0,
            change_mid_max: 5.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n_scenes == 0 {
            return bad("n_scenes must be positive".into());
        }
        if self.n_vehicles_min == 0 || self.n_vehicles_min > self.n_vehicles_max {
            return bad(format!("vehicle range [{}, {}] is empty", self.n_vehicles_min, self.n_vehicles_max));
        }
        if self.n_lanes < 2 {
            return bad(format!("n_lanes must be at least 2, got {}", self.n_lanes));
        }
        if !(0.0..=1.0).contains(&self.lane_change_prob) {
            return bad(format!("lane_change_prob {} outside [0, 1]", self.lane_change_prob));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(self.dt > 0.0) || self.t_obs < 2 || self.t_pred == 0 {
            return bad(format!("bad time grid dt={} t_obs={} t_pred={}", self.dt, self.t_obs, self.t_pred));
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return bad(format!("speed range [{}, {}] invalid", self.speed_min, self.speed_max));
        }
        if !(self.range_lon > 0.0) || !(self.change_mid_max >= 0.0) {
            return bad("range_lon must be positive and change_mid_max non-negative".into());
        }
        Ok(())
    }
}

/// One executed lane change; lanes are numbered from the rightmost (0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaneChange {
    pub vehicle_id: u64,
    pub from_lane: usize,
    pub to_lane: usize,
    /// Seconds after the last observed step.
    pub t_mid: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub lane_changes: Vec<LaneChange>,
    /// Lane of every vehicle slot at the last observed step.
    pub lane_at_last_obs: Vec<usize>,
}

/// Logistic time constant giving a 1 %→99 % transition over [`LANE_CHANGE_DURATION`].
pub fn lane_change_tau() -> f64 {
    (LANE_CHANGE_DURATION / 2.0) / 99f64.ln()
}

/// Fraction of the lateral offset completed at time `t` for a change centred at `t_mid`.
pub fn lane_change_progress(t: f64, t_mid: f64) -> f64 {
    1.0 / (1.0 + (-(t - t_mid) / lane_change_tau()).exp())
}

struct Vehicle {
    x0: f64,
    speed: f64,
    lane: usize,
    change: Option<(usize, f64)>,
    props: [f64; VEHICLE_PROPS],
}

impl Vehicle {
    fn position(&self, t: f64) -> [f64; 2] {
        let y_from = self.lane as f64 * LANE_WIDTH;
        let y = match self.change {
            Some((to, t_mid)) => y_from + (to as f64 * LANE_WIDTH - y_from) * lane_change_progress(t, t_mid),
            None => y_from,
        };
        [self.x0 + self.speed * t, y]
    }

    fn lane_at(&self, t: f64) -> usize {
        match self.change {
            Some((to, t_mid)) if t >= t_mid => to,
            _ => self.lane,
        }
    }
}

fn sample_vehicle(cfg: &SynthConfig, rng: &mut ChaCha8Rng, x0: f64) -> Vehicle {
    let lane = rng.random_range(0..cfg.n_lanes);
    let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
    let props = if rng.random_bool(0.15) {
        [rng.random_range(10.0..18.0), rng.random_range(2.4..2.6)]
    } else {
        [rng.random_range(4.0..5.5), rng.random_range(1.7..2.1)]
    };
    let change = rng.random_bool(cfg.lane_change_prob).then(|| {
        let to = if lane == 0 {
            1
        } else if lane + 1 == cfg.n_lanes || rng.random_bool(0.5) {
            lane - 1
        } else {
            lane + 1
        };
        (to, rng.random_range(0.0..=cfg.change_mid_max))
    });
    Vehicle { x0, speed, lane, change, props }
}

/// Generates `cfg.n_scenes` scenes deterministically from `seed`. Scene ids
/// are `0..n_scenes`; the ego is slot 0 with vehicle id 0.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let (t_obs, t_pred) = (cfg.t_obs, cfg.t_pred);
    let steps = t_obs + t_pred;
    let time = |j: usize| (j as f64 - (t_obs - 1) as f64) * cfg.dt;

    (0..cfg.n_scenes)
        .map(|sid| {
            let n = rng.random_range(cfg.n_vehicles_min..=cfg.n_vehicles_max);
            let mut vehicles = vec![sample_vehicle(cfg, &mut rng, 0.0)];
            for _ in 1..n {
                let x0 = rng.random_range(-cfg.range_lon..=cfg.range_lon);
                vehicles.push(sample_vehicle(cfg, &mut rng, x0));
            }
            let mut track: Vec<[f64; 2]> = Vec::with_capacity(n * steps);
            for v in &vehicles {
                for j in 0..steps {
                    let [x, y] = v.position(time(j));
                    track.push([x + noise.sample(&mut rng), y + noise.sample(&mut rng)]);
                }
            }
            let origin = track[t_obs - 1];
            let mut past = Vec::with_capacity(n * t_obs * 2);
            let mut future = Vec::with_capacity(n * t_pred * 2);
            for i in 0..n {
                for j in 0..steps {
                    let p = track[i * steps + j];
                    let rel = [p[0] - origin[0], p[1] - origin[1]];
                    if j < t_obs { &mut past } else { &mut future }.extend_from_slice(&rel);
                }
            }
            let lanes = (0..cfg.n_lanes)
                .flat_map(|k| {
                    let center = k as f64 * LANE_WIDTH - origin[1];
                    [center, center + LANE_WIDTH / 2.0, center - LANE_WIDTH / 2.0]
                })
                .collect::<Vec<_>>();
            debug_assert_eq!(lanes.len(), cfg.n_lanes * LANE_FEATURES);
            let scene = Scene {
                id: sid as u64,
                ego_index: 0,
                dt: cfg.dt,
                t_obs,
                t_pred,
                vehicle_ids: (0..n as u64).collect(),
                past,
                props: vehicles.iter().flat_map(|v| v.props).collect(),
                future,
                vehicle_mask: vec![true; n],
                lanes,
                lane_mask: vec![true; cfg.n_lanes],
            };
            let lane_changes = vehicles
                .iter()
                .enumerate()
                .filter_map(|(i, v)| {
                    v.change.map(|(to, t_mid)| LaneChange { vehicle_id: i as u64, from_lane: v.lane, to_lane: to, t_mid })
                })
                .collect();
            let lane_at_last_obs = vehicles.iter().map(|v| v.lane_at(0.0)).collect();
            Ok(SyntheticScene { scene, lane_changes, lane_at_last_obs })
        })
        .collect()
}

/// Convenience: the scenes alone.
pub fn synth_scenes(cfg: &SynthConfig, seed: u64) -> Result<Vec<Scene>> {
    Ok(synth_generate(cfg, seed)?.into_iter().map(|s| s.scene).collect())
}
