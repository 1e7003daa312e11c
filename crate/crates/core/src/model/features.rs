//! Fixed preprocessing from ego-frame meters to network inputs, and the
//! mean anchor the head's outputs are added to.

use super::hyper::{Anchor, Hyperparams};
use crate::data::{Batch, LANE_FEATURES, VEHICLE_PROPS};

/// `[B, n, 2·t_obs + k_props]`: past displacements relative to the last
/// observed position, that position itself in the last slot, then props.
/// Padded slots stay zero.
pub fn vehicle_features(h: &Hyperparams, batch: &Batch) -> Vec<f64> {
    let s = &h.scale;
    let t_obs = batch.t_obs;
    let width = 2 * t_obs + VEHICLE_PROPS;
    let slots = batch.size() * batch.n;
    let mut out = vec![0.0; slots * width];
    for slot in (0..slots).filter(|&k| batch.vehicle_valid[k]) {
        let past = &batch.past[slot * t_obs * 2..(slot + 1) * t_obs * 2];
        let (lx, ly) = (past[2 * (t_obs - 1)], past[2 * (t_obs - 1) + 1]);
        let row = &mut out[slot * width..(slot + 1) * width];
        for t in 0..t_obs - 1 {
            row[2 * t] = (past[2 * t] - lx) / s.motion_lon;
            row[2 * t + 1] = (past[2 * t + 1] - ly) / s.motion_lat;
        }
        row[2 * (t_obs - 1)] = lx / s.position_lon;
        row[2 * (t_obs - 1) + 1] = ly / s.position_lat;
        for p in 0..VEHICLE_PROPS {
            row[2 * t_obs + p] = batch.props[slot * VEHICLE_PROPS + p] / s.props;
        }
    }
    out
}

/// `[B, m, LANE_FEATURES]` scaled lane geometry.
pub fn lane_features(h: &Hyperparams, batch: &Batch) -> Vec<f64> {
    debug_assert_eq!(batch.lanes.len(), batch.size() * batch.m * LANE_FEATURES);
    batch.lanes.iter().map(|v| v / h.scale.lane).collect()
}

/// Mean anchor for one vehicle's past `[t_obs, 2]`, returned as `[t_pred, 2]`.
pub fn anchor_for(anchor: Anchor, past: &[f64], t_pred: usize) -> Vec<f64> {
    let t_obs = past.len() / 2;
    let last = [past[2 * (t_obs - 1)], past[2 * (t_obs - 1) + 1]];
    match anchor {
        Anchor::LastPosition => (0..t_pred).flat_map(|_| last).collect(),
        Anchor::ConstantVelocity => {
            let n = t_obs as f64;
            let t_mean = (n - 1.0) / 2.0;
            let sxx: f64 = (0..t_obs).map(|t| (t as f64 - t_mean).powi(2)).sum();
            let mut fit = [[0.0; 2]; 2];
            for axis in 0..2 {
                let mean = (0..t_obs).map(|t| past[2 * t + axis]).sum::<f64>() / n;
                let sxy: f64 = (0..t_obs).map(|t| (t as f64 - t_mean) * (past[2 * t + axis] - mean)).sum();
                let slope = sxy / sxx;
                fit[axis] = [mean + slope * ((n - 1.0) - t_mean), slope];
            }
            (1..=t_pred)
                .flat_map(|k| [fit[0][0] + fit[0][1] * k as f64, fit[1][0] + fit[1][1] * k as f64])
                .collect()
        }
    }
}

/// `[B, n, t_pred, 2]` anchors; padded slots are zero.
pub fn batch_anchor(h: &Hyperparams, batch: &Batch) -> Vec<f64> {
    let (t_obs, t_pred) = (batch.t_obs, batch.t_pred);
    let slots = batch.size() * batch.n;
    let mut out = vec![0.0; slots * t_pred * 2];
    for slot in (0..slots).filter(|&k| batch.vehicle_valid[k]) {
        let a = anchor_for(h.anchor, &batch.past[slot * t_obs * 2..(slot + 1) * t_obs * 2], t_pred);
        out[slot * t_pred * 2..(slot + 1) * t_pred * 2].copy_from_slice(&a);
    }
    out
}
