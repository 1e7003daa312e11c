//! Flat `key = value` run configuration covering every knob of a run.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::baselines::KalmanCvConfig;
use crate::data::{BuildConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::kv::{self, fmt_f64, parse_bool, parse_value as p};
use crate::model::Hyperparams;
use crate::training::{AdamConfig, LossWeights, TrainConfig, DEFAULT_CLIP_NORM};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub hyper: Hyperparams,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip: bool,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub predict_ego: bool,
    pub val_fraction: f64,
    pub kalman_q: f64,
    pub kalman_r: f64,
    pub synth: SynthConfig,
    pub ingest: BuildConfig,
    pub horizons: Vec<f64>,
    pub bench_vehicles: usize,
    pub bench_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let kalman = KalmanCvConfig::default();
        Self {
            seed: 0,
            hyper: Hyperparams::default(),
            epochs: train.epochs,
            batch_size: train.batch_size,
            adam: train.adam,
            clip: false,
            clip_norm: DEFAULT_CLIP_NORM,
            weights: train.weights,
            predict_ego: train.predict_ego,
            val_fraction: train.val_fraction,
            kalman_q: kalman.q,
            kalman_r: kalman.r,
            synth: SynthConfig::default(),
            ingest: BuildConfig::default(),
            horizons: vec![1.0, 2.0, 3.0],
            bench_vehicles: 30,
            bench_repeats: 200,
        }
    }
}

impl RunConfig {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = self.hyper.to_map();
        let s = &self.synth;
        let b = &self.ingest;
        let entries = [
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", fmt_f64(self.adam.lr)),
            ("beta1", fmt_f64(self.adam.beta1)),
            ("beta2", fmt_f64(self.adam.beta2)),
            ("adam_eps", fmt_f64(self.adam.eps)),
            ("clip", self.clip.to_string()),
            ("clip_norm", fmt_f64(self.clip_norm)),
            ("w_nll", fmt_f64(self.weights.nll)),
            ("w_recon", fmt_f64(self.weights.recon)),
            ("predict_ego", self.predict_ego.to_string()),
            ("val_fraction", fmt_f64(self.val_fraction)),
            ("kalman_q", fmt_f64(self.kalman_q)),
            ("kalman_r", fmt_f64(self.kalman_r)),
            ("n_scenes", s.n_scenes.to_string()),
            ("n_vehicles_min", s.n_vehicles_min.to_string()),
            ("n_vehicles_max", s.n_vehicles_max.to_string()),
            ("n_lanes", s.n_lanes.to_string()),
            ("lane_change_prob", fmt_f64(s.lane_change_prob)),
            ("noise_sigma", fmt_f64(s.noise_sigma)),
            ("dt", fmt_f64(s.dt)),
            ("speed_min", fmt_f64(s.speed_min)),
            ("speed_max", fmt_f64(s.speed_max)),
            ("range_lon", fmt_f64(s.range_lon)),
            ("change_mid_max", fmt_f64(s.change_mid_max)),
            ("stride", b.stride.to_string()),
            ("target_rate_hz", fmt_f64(b.target_rate_hz)),
            ("radius_lon", fmt_f64(b.radius_lon)),
            ("max_vehicles", b.max_vehicles.to_string()),
            ("ego_stride", b.ego_stride.to_string()),
            ("horizons", self.horizons.iter().map(|h| fmt_f64(*h)).collect::<Vec<_>>().join(",")),
            ("bench_vehicles", self.bench_vehicles.to_string()),
            ("bench_repeats", self.bench_repeats.to_string()),
        ];
        m.extend(entries.into_iter().map(|(k, v)| (k.to_string(), v)));
        m
    }

    pub fn keys() -> Vec<String> {
        RunConfig::default().to_map().into_keys().collect()
    }

    /// Canonical text: every key in order, so equal configs give equal text.
    pub fn to_text(&self) -> String {
        kv::render(&self.to_map())
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Sets one key from its text value. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        if Hyperparams::keys().iter().any(|k| k == key) {
            return self.hyper.set(key, raw);
        }
        let s = &mut self.synth;
        let b = &mut self.ingest;
        match key {
            "seed" => self.seed = p(key, raw)?,
            "epochs" => self.epochs = p(key, raw)?,
            "batch_size" => self.batch_size = p(key, raw)?,
            "lr" => self.adam.lr = p(key, raw)?,
            "beta1" => self.adam.beta1 = p(key, raw)?,
            "beta2" => self.adam.beta2 = p(key, raw)?,
            "adam_eps" => self.adam.eps = p(key, raw)?,
            "clip" => self.clip = parse_bool(key, raw)?,
            "clip_norm" => self.clip_norm = p(key, raw)?,
            "w_nll" => self.weights.nll = p(key, raw)?,
            "w_recon" => self.weights.recon = p(key, raw)?,
            "predict_ego" => self.predict_ego = parse_bool(key, raw)?,
            "val_fraction" => self.val_fraction = p(key, raw)?,
            "kalman_q" => self.kalman_q = p(key, raw)?,
            "kalman_r" => self.kalman_r = p(key, raw)?,
            "n_scenes" => s.n_scenes = p(key, raw)?,
            "n_vehicles_min" => s.n_vehicles_min = p(key, raw)?,
            "n_vehicles_max" => s.n_vehicles_max = p(key, raw)?,
            "n_lanes" => s.n_lanes = p(key, raw)?,
            "lane_change_prob" => s.lane_change_prob = p(key, raw)?,
            "noise_sigma" => s.noise_sigma = p(key, raw)?,
            "dt" => s.dt = p(key, raw)?,
            "speed_min" => s.speed_min = p(key, raw)?,
            "speed_max" => s.speed_max = p(key, raw)?,
            "range_lon" => s.range_lon = p(key, raw)?,
            "change_mid_max" => s.change_mid_max = p(key, raw)?,
            "stride" => b.stride = p(key, raw)?,
            "target_rate_hz" => b.target_rate_hz = p(key, raw)?,
            "radius_lon" => b.radius_lon = p(key, raw)?,
            "max_vehicles" => b.max_vehicles = p(key, raw)?,
            "ego_stride" => b.ego_stride = p(key, raw)?,
            "horizons" => {
                self.horizons = raw.split(',').map(|h| p(key, h.trim())).collect::<Result<_>>()?;
                if self.horizons.is_empty() {
                    return Err(Error::Config("horizons must list at least one value".into()));
                }
            }
            "bench_vehicles" => self.bench_vehicles = p(key, raw)?,
            "bench_repeats" => self.bench_repeats = p(key, raw)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by every entry of a `key = value` text.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v) in kv::parse(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.train_config().validate()?;
        self.kalman().validate()?;
        self.synth_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            weights: self.weights,
            adam: AdamConfig { clip_norm: self.clip.then_some(self.clip_norm), ..self.adam },
            predict_ego: self.predict_ego,
            val_fraction: self.val_fraction,
        }
    }

    pub fn kalman(&self) -> KalmanCvConfig {
        KalmanCvConfig { q: self.kalman_q, r: self.kalman_r, dt: self.synth.dt }
    }

    /// Synthetic-data settings with the model's horizons.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { t_obs: self.hyper.t_obs, t_pred: self.hyper.t_pred, ..self.synth.clone() }
    }

    /// highD scene-construction settings with the model's horizons.
    pub fn build_config(&self) -> BuildConfig {
        BuildConfig { t_obs: self.hyper.t_obs, t_pred: self.hyper.t_pred, ..self.ingest.clone() }
    }
}
