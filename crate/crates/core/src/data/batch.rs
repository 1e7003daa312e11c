//! Padding scenes of different sizes into dense batch tensors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scene::{Scene, LANE_FEATURES, VEHICLE_PROPS};
use crate::error::{Error, Result};

/// Scenes padded to the largest vehicle and lane counts in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub scene_ids: Vec<u64>,
    /// Padded vehicle slot count.
    pub n: usize,
    /// Padded lane slot count.
    pub m: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    /// `[B, n, t_obs, 2]`
    pub past: Vec<f64>,
    /// `[B, n, VEHICLE_PROPS]`
    pub props: Vec<f64>,
    /// `[B, n, t_pred, 2]`
    pub future: Vec<f64>,
    /// `[B, m, LANE_FEATURES]`
    pub lanes: Vec<f64>,
    /// Real vehicles, used as the attention key mask. `[B * n]`
    pub vehicle_valid: Vec<bool>,
    /// Vehicles that count toward losses and metrics. `[B * n]`
    pub target_valid: Vec<bool>,
    /// `[B * m]`
    pub lane_valid: Vec<bool>,
    /// Each scene's own (vehicle slots, lane slots) before batch padding.
    pub slots: Vec<(usize, usize)>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.scene_ids.len()
    }

    /// Pads `scenes` into one batch. With `predict_ego == false` the ego
    /// stays visible to attention but is excluded from `target_valid`.
    pub fn from_scenes(scenes: &[&Scene], predict_ego: bool) -> Result<Batch> {
        let first = scenes
            .first()
            .ok_or_else(|| Error::Parameter("cannot batch an empty scene set".into()))?;
        let (t_obs, t_pred) = (first.t_obs, first.t_pred);
        for s in scenes {
            if s.t_obs != t_obs || s.t_pred != t_pred {
                return Err(Error::Dimension(format!(
                    "scene {} has horizon ({}, {}) but batch uses ({t_obs}, {t_pred})",
                    s.id, s.t_obs, s.t_pred
                )));
            }
            if s.n_valid() == 0 {
                return Err(Error::DegenerateScene { scene: s.id, reason: "no unmasked vehicle".into() });
            }
            if !s.lane_mask.iter().any(|&v| v) {
                return Err(Error::DegenerateScene { scene: s.id, reason: "no unmasked lane".into() });
            }
        }
        let b = scenes.len();
        let n = scenes.iter().map(|s| s.n_slots()).max().unwrap();
        let m = scenes.iter().map(|s| s.n_lanes()).max().unwrap();
        let mut batch = Batch {
            scene_ids: scenes.iter().map(|s| s.id).collect(),
            n,
            m,
            t_obs,
            t_pred,
            past: vec![0.0; b * n * t_obs * 2],
            props: vec![0.0; b * n * VEHICLE_PROPS],
            future: vec![0.0; b * n * t_pred * 2],
            lanes: vec![0.0; b * m * LANE_FEATURES],
            vehicle_valid: vec![false; b * n],
            target_valid: vec![false; b * n],
            lane_valid: vec![false; b * m],
            slots: scenes.iter().map(|s| (s.n_slots(), s.n_lanes())).collect(),
        };
        for (bi, s) in scenes.iter().enumerate() {
            let sn = s.n_slots();
            let po = bi * n * t_obs * 2;
            batch.past[po..po + s.past.len()].copy_from_slice(&s.past);
            let fo = bi * n * t_pred * 2;
            batch.future[fo..fo + s.future.len()].copy_from_slice(&s.future);
            let pr = bi * n * VEHICLE_PROPS;
            batch.props[pr..pr + s.props.len()].copy_from_slice(&s.props);
            let lo = bi * m * LANE_FEATURES;
            batch.lanes[lo..lo + s.lanes.len()].copy_from_slice(&s.lanes);
            for i in 0..sn {
                let valid = s.vehicle_mask[i];
                batch.vehicle_valid[bi * n + i] = valid;
                batch.target_valid[bi * n + i] = valid && (predict_ego || i != s.ego_index);
            }
            batch.lane_valid[bi * m..bi * m + s.n_lanes()].copy_from_slice(&s.lane_mask);
        }
        Ok(batch)
    }
}

/// Deterministic batch iterator over a scene slice.
pub struct Batches<'a> {
    scenes: &'a [Scene],
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    predict_ego: bool,
}

impl<'a> Batches<'a> {
    /// Scene indices in iteration order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let members: Vec<&Scene> = self.order[self.cursor..end].iter().map(|&i| &self.scenes[i]).collect();
        self.cursor = end;
        Some(Batch::from_scenes(&members, self.predict_ego))
    }
}

/// Splits `scenes` into padded batches. `shuffle_seed == None` keeps input order.
pub fn batches(scenes: &[Scene], batch_size: usize, shuffle_seed: Option<u64>, predict_ego: bool) -> Result<Batches<'_>> {
    if scenes.is_empty() {
        return Err(Error::Parameter("cannot batch an empty scene set".into()));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches { scenes, order, batch_size, cursor: 0, predict_ego })
}
