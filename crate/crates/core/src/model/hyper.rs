use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::MultiHeadConfig;
use crate::error::{Error, Result};
use crate::kv;

/// Reference point the predicted means are offset from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchor {
    /// Each vehicle's last observed position.
    LastPosition,
    /// Least-squares constant-velocity extrapolation of the observed past.
    ConstantVelocity,
}

impl fmt::Display for Anchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Anchor::LastPosition => "last",
            Anchor::ConstantVelocity => "cv",
        })
    }
}

impl FromStr for Anchor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Anchor::LastPosition),
            "cv" => Ok(Anchor::ConstantVelocity),
            _ => Err(Error::Config(format!("anchor must be `last` or `cv`, got `{s}`"))),
        }
    }
}

/// Fixed input scaling applied before the embeddings (meters per unit).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureScale {
    /// Past displacement relative to the last observed position.
    pub motion_lon: f64,
    pub motion_lat: f64,
    /// Last observed position in the ego frame.
    pub position_lon: f64,
    pub position_lat: f64,
    pub props: f64,
    pub lane: f64,
}

impl Default for FeatureScale {
    fn default() -> Self {
        Self { motion_lon: 20.0, motion_lat: 1.0, position_lon: 50.0, position_lat: 5.0, props: 5.0, lane: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub t_obs: usize,
    pub t_pred: usize,
    pub k_props: usize,
    pub d_lane_feat: usize,
    pub d_veh_embed: usize,
    pub d_lane_embed: usize,
    pub heads: usize,
    pub d_head_veh: usize,
    pub d_head_lane: usize,
    /// Drop probability of the residual dropout.
    pub p_drop: f64,
    pub ln_epsilon: f64,
    /// Meters; Σ eigenvalues never fall below its square.
    pub sigma_floor: f64,
    pub anchor: Anchor,
    pub scale: FeatureScale,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            t_obs: 10,
            t_pred: 15,
            k_props: 2,
            d_lane_feat: 3,
            d_veh_embed: 16,
            d_lane_embed: 4,
            heads: 4,
            d_head_veh: 8,
            d_head_lane: 32,
            p_drop: 0.7,
            ln_epsilon: 1e-6,
            sigma_floor: 0.01,
            anchor: Anchor::ConstantVelocity,
            scale: FeatureScale::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("t_obs", self.t_obs),
            ("t_pred", self.t_pred),
            ("k_props", self.k_props),
            ("d_lane_feat", self.d_lane_feat),
            ("d_veh_embed", self.d_veh_embed),
            ("d_lane_embed", self.d_lane_embed),
            ("heads", self.heads),
            ("d_head_veh", self.d_head_veh),
            ("d_head_lane", self.d_head_lane),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be positive")));
        }
        if self.anchor == Anchor::ConstantVelocity && self.t_obs < 2 {
            return Err(Error::Parameter("constant-velocity anchor needs t_obs >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::Parameter(format!("p_drop {} outside [0, 1)", self.p_drop)));
        }
        let s = &self.scale;
        let positives = [
            ("ln_epsilon", self.ln_epsilon),
            ("sigma_floor", self.sigma_floor),
            ("scale_motion_lon", s.motion_lon),
            ("scale_motion_lat", s.motion_lat),
            ("scale_position_lon", s.position_lon),
            ("scale_position_lat", s.position_lat),
            ("scale_props", s.props),
            ("scale_lane", s.lane),
        ];
        if let Some((name, v)) = positives.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Parameter(format!("{name} must be positive and finite, got {v}")));
        }
        Ok(())
    }

    /// Vehicle input width: flattened past plus properties.
    pub fn vehicle_input_dim(&self) -> usize {
        2 * self.t_obs + self.k_props
    }

    /// Width of Z: vehicle-attention output concatenated with lane-attention output.
    pub fn d_z(&self) -> usize {
        2 * self.d_veh_embed
    }

    /// Gaussian head outputs (μx, μy, a, b, c) per future step.
    pub fn head_out_dim(&self) -> usize {
        5 * self.t_pred
    }

    pub fn vehicle_encoder_cfg(&self) -> MultiHeadConfig {
        MultiHeadConfig {
            heads: self.heads,
            d_q_in: self.d_veh_embed,
            d_kv_in: self.d_veh_embed,
            d_head: self.d_head_veh,
            d_out: self.d_veh_embed,
        }
    }

    pub fn lane_encoder_cfg(&self) -> MultiHeadConfig {
        MultiHeadConfig {
            heads: self.heads,
            d_q_in: self.d_veh_embed,
            d_kv_in: self.d_lane_embed,
            d_head: self.d_head_lane,
            d_out: self.d_veh_embed,
        }
    }

    /// Same head count and head width as the encoder's vehicle layer.
    pub fn decoder_cfg(&self) -> MultiHeadConfig {
        MultiHeadConfig {
            heads: self.heads,
            d_q_in: self.d_z(),
            d_kv_in: self.d_z(),
            d_head: self.d_head_veh,
            d_out: self.d_z(),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let f = kv::fmt_f64;
        let s = &self.scale;
        [
            ("t_obs", self.t_obs.to_string()),
            ("t_pred", self.t_pred.to_string()),
            ("k_props", self.k_props.to_string()),
            ("d_lane_feat", self.d_lane_feat.to_string()),
            ("d_veh_embed", self.d_veh_embed.to_string()),
            ("d_lane_embed", self.d_lane_embed.to_string()),
            ("heads", self.heads.to_string()),
            ("d_head_veh", self.d_head_veh.to_string()),
            ("d_head_lane", self.d_head_lane.to_string()),
            ("p_drop", f(self.p_drop)),
            ("ln_epsilon", f(self.ln_epsilon)),
            ("sigma_floor", f(self.sigma_floor)),
            ("anchor", self.anchor.to_string()),
            ("scale_motion_lon", f(s.motion_lon)),
            ("scale_motion_lat", f(s.motion_lat)),
            ("scale_position_lon", f(s.position_lon)),
            ("scale_position_lat", f(s.position_lat)),
            ("scale_props", f(s.props)),
            ("scale_lane", f(s.lane)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Canonical `key = value` block.
    pub fn to_text(&self) -> String {
        kv::render(&self.to_map())
    }

    pub fn keys() -> Vec<String> {
        Hyperparams::default().to_map().into_keys().collect()
    }

    /// Overrides one field by its text key.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        use kv::parse_value as p;
        match key {
            "t_obs" => self.t_obs = p(key, raw)?,
            "t_pred" => self.t_pred = p(key, raw)?,
            "k_props" => self.k_props = p(key, raw)?,
            "d_lane_feat" => self.d_lane_feat = p(key, raw)?,
            "d_veh_embed" => self.d_veh_embed = p(key, raw)?,
            "d_lane_embed" => self.d_lane_embed = p(key, raw)?,
            "heads" => self.heads = p(key, raw)?,
            "d_head_veh" => self.d_head_veh = p(key, raw)?,
            "d_head_lane" => self.d_head_lane = p(key, raw)?,
            "p_drop" => self.p_drop = p(key, raw)?,
            "ln_epsilon" => self.ln_epsilon = p(key, raw)?,
            "sigma_floor" => self.sigma_floor = p(key, raw)?,
            "anchor" => self.anchor = raw.parse()?,
            "scale_motion_lon" => self.scale.motion_lon = p(key, raw)?,
            "scale_motion_lat" => self.scale.motion_lat = p(key, raw)?,
            "scale_position_lon" => self.scale.position_lon = p(key, raw)?,
            "scale_position_lat" => self.scale.position_lat = p(key, raw)?,
            "scale_props" => self.scale.props = p(key, raw)?,
            "scale_lane" => self.scale.lane = p(key, raw)?,
            _ => return Err(Error::Config(format!("unknown hyperparameter `{key}`"))),
        }
        Ok(())
    }

    /// Parses a complete canonical block; every key must be present.
    pub fn from_text(text: &str) -> Result<Self> {
        let map = kv::parse(text)?;
        let mut h = Hyperparams::default();
        for key in Hyperparams::keys() {
            let raw = map.get(&key).ok_or_else(|| Error::Config(format!("hyperparameter block lacks `{key}`")))?;
            h.set(&key, raw)?;
        }
        if map.len() != Hyperparams::keys().len() {
            let extra = map.keys().find(|k| !Hyperparams::keys().contains(k)).unwrap();
            return Err(Error::Config(format!("unknown hyperparameter `{extra}`")));
        }
        h.validate()?;
        Ok(h)
    }
}
