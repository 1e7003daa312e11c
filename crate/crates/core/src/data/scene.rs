use crate::error::{Error, Result};

/// Vehicle properties carried per slot: length and width in meters.
pub const VEHICLE_PROPS: usize = 2;
/// Lane features: center, left boundary and right boundary lateral offsets.
pub const LANE_FEATURES: usize = 3;

/// One prediction instance in the ego frame: x along the direction of
/// travel, y pointing left, origin at the ego's last observed position.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub ego_index: usize,
    /// Seconds between consecutive samples.
    pub dt: f64,
    pub t_obs: usize,
    pub t_pred: usize,
    pub vehicle_ids: Vec<u64>,
    /// `[N, t_obs, 2]`
    pub past: Vec<f64>,
    /// `[N, VEHICLE_PROPS]`
    pub props: Vec<f64>,
    /// `[N, t_pred, 2]`
    pub future: Vec<f64>,
    pub vehicle_mask: Vec<bool>,
    /// `[M, LANE_FEATURES]`
    pub lanes: Vec<f64>,
    pub lane_mask: Vec<bool>,
}

impl Scene {
    pub fn n_slots(&self) -> usize {
        self.vehicle_mask.len()
    }

    pub fn n_lanes(&self) -> usize {
        self.lane_mask.len()
    }

    pub fn n_valid(&self) -> usize {
        self.vehicle_mask.iter().filter(|&&m| m).count()
    }

    pub fn ego_id(&self) -> u64 {
        self.vehicle_ids[self.ego_index]
    }

    pub fn past_at(&self, i: usize, t: usize) -> [f64; 2] {
        let o = (i * self.t_obs + t) * 2;
        [self.past[o], self.past[o + 1]]
    }

    pub fn future_at(&self, i: usize, t: usize) -> [f64; 2] {
        let o = (i * self.t_pred + t) * 2;
        [self.future[o], self.future[o + 1]]
    }

    pub fn past_of(&self, i: usize) -> &[f64] {
        &self.past[i * self.t_obs * 2..(i + 1) * self.t_obs * 2]
    }

    pub fn future_of(&self, i: usize) -> &[f64] {
        &self.future[i * self.t_pred * 2..(i + 1) * self.t_pred * 2]
    }

    pub fn lane(&self, m: usize) -> [f64; LANE_FEATURES] {
        let o = m * LANE_FEATURES;
        [self.lanes[o], self.lanes[o + 1], self.lanes[o + 2]]
    }

    pub fn slot_of(&self, vehicle_id: u64) -> Option<usize> {
        self.vehicle_ids.iter().position(|&id| id == vehicle_id)
    }

    /// Checks every structural invariant of a scene.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::DegenerateScene { scene: self.id, reason });
        let n = self.n_slots();
        let m = self.n_lanes();
        if n == 0 || m == 0 {
            return fail(format!("needs at least one vehicle slot and one lane, got N={n}, M={m}"));
        }
        if self.t_obs == 0 || self.t_pred == 0 || !(self.dt > 0.0) {
            return fail(format!("bad time grid t_obs={} t_pred={} dt={}", self.t_obs, self.t_pred, self.dt));
        }
        if self.vehicle_ids.len() != n
            || self.past.len() != n * self.t_obs * 2
            || self.future.len() != n * self.t_pred * 2
            || self.props.len() != n * VEHICLE_PROPS
            || self.lanes.len() != m * LANE_FEATURES
        {
            return fail("array lengths disagree with slot counts".into());
        }
        if self.ego_index >= n || !self.vehicle_mask[self.ego_index] {
            return fail("ego slot missing or masked".into());
        }
        if self.past_at(self.ego_index, self.t_obs - 1) != [0.0, 0.0] {
            return fail("ego is not at the origin at the last observed step".into());
        }
        let all = self.past.iter().chain(&self.future).chain(&self.props).chain(&self.lanes);
        if all.clone().any(|v| !v.is_finite()) {
            return fail("non-finite coordinate".into());
        }
        for i in (0..n).filter(|&i| !self.vehicle_mask[i]) {
            let zero = self.past_of(i).iter().chain(self.future_of(i)).chain(&self.props[i * 2..i * 2 + 2]);
            if zero.into_iter().any(|&v| v != 0.0) {
                return fail(format!("masked vehicle slot {i} is not zero-filled"));
            }
        }
        for k in 0..m {
            let [center, left, right] = self.lane(k);
            if self.lane_mask[k] {
                if !(left > center && center > right) {
                    return fail(format!("lane {k} boundaries out of order: {left} / {center} / {right}"));
                }
            } else if [center, left, right] != [0.0; 3] {
                return fail(format!("masked lane slot {k} is not zero-filled"));
            }
        }
        Ok(())
    }

    /// Reorders vehicle slots: new slot `j` holds old slot `perm[j]`.
    pub fn permute_vehicles(&self, perm: &[usize]) -> Scene {
        assert_eq!(perm.len(), self.n_slots(), "permutation length");
        let gather = |src: &[f64], width: usize| -> Vec<f64> {
            perm.iter().flat_map(|&p| src[p * width..(p + 1) * width].iter().copied()).collect()
        };
        Scene {
            id: self.id,
            ego_index: perm.iter().position(|&p| p == self.ego_index).expect("permutation"),
            dt: self.dt,
            t_obs: self.t_obs,
            t_pred: self.t_pred,
            vehicle_ids: perm.iter().map(|&p| self.vehicle_ids[p]).collect(),
            past: gather(&self.past, self.t_obs * 2),
            props: gather(&self.props, VEHICLE_PROPS),
            future: gather(&self.future, self.t_pred * 2),
            vehicle_mask: perm.iter().map(|&p| self.vehicle_mask[p]).collect(),
            lanes: self.lanes.clone(),
            lane_mask: self.lane_mask.clone(),
        }
    }
}
