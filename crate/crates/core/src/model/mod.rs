//! The encoder-decoder: embeddings, vehicle and lane attention encoder,
//! vehicle attention decoder and the Gaussian output head.

mod features;
mod gaussian;
mod hyper;
mod params;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use features::{anchor_for, batch_anchor, lane_features, vehicle_features};
pub use gaussian::{
    covariance_from_chol, mahalanobis2, neg_log_density, nll_raw_with_grad, sigmoid, softplus, sym2_eigenvalues,
    GaussianForecast, RAW_PER_STEP,
};
pub use hyper::{Anchor, FeatureScale, Hyperparams};
pub use params::{init_params, parameter_layout, Init, ParamSpec, ParamStore};

use crate::attention::{attention_block, AttentionOutput, AttentionRecord, BlockParams, LayerTag, MultiHeadParams};
use crate::data::{Batch, Scene, LANE_FEATURES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Tensor, Var};

/// Graph handles of every parameter, keyed by name.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Places every tensor of `store` on `g`; `trainable` decides whether
    /// they receive gradients.
    pub fn bind(g: &mut Graph, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.input(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn block(&self, prefix: &str, heads: usize) -> Result<BlockParams> {
        let per_head = |what: &str| -> Result<Vec<Var>> {
            (0..heads).map(|i| self.get(&format!("{prefix}.head{i}.{what}"))).collect()
        };
        Ok(BlockParams {
            attn: MultiHeadParams {
                wq: per_head("wq")?,
                wk: per_head("wk")?,
                wv: per_head("wv")?,
                wo: self.get(&format!("{prefix}.wo"))?,
            },
            ln_gain: self.get(&format!("{prefix}.ln.gain"))?,
            ln_bias: self.get(&format!("{prefix}.ln.bias"))?,
        })
    }
}

fn checked_affine(g: &mut Graph, x: Var, w: Var, b: Var, what: &str) -> Result<Var> {
    let (got, want) = (g.value(x).last_dim(), g.value(w).shape()[0]);
    if got != want {
        return Err(Error::Dimension(format!("{what} input has {got} features, expected {want}")));
    }
    g.affine(x, w, b)
}

/// Flattened past plus properties `[.., 2·t_obs + k_props]` → `[.., d_veh_embed]`.
pub fn embed_vehicle(g: &mut Graph, x: Var, pv: &ParamVars) -> Result<Var> {
    checked_affine(g, x, pv.get("embed.vehicle.w")?, pv.get("embed.vehicle.b")?, "vehicle embedding")
}

/// Lane features `[.., d_lane_feat]` → `[.., d_lane_embed]`.
pub fn embed_lane(g: &mut Graph, x: Var, pv: &ParamVars) -> Result<Var> {
    checked_affine(g, x, pv.get("embed.lane.w")?, pv.get("embed.lane.b")?, "lane embedding")
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[.., n, d_z]`: vehicle-attention output then lane-attention output.
    pub z: Var,
    pub vehicle_weights: Vec<Var>,
    pub lane_weights: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
pub fn encode<R: Rng + ?Sized>(
    g: &mut Graph,
    h: &Hyperparams,
    pv: &ParamVars,
    vehicles: Var,
    lanes: Var,
    vehicle_valid: &[bool],
    lane_valid: &[bool],
    mode: Mode,
    rng: &mut R,
) -> Result<EncoderOutput> {
    let veh = pv.block("encoder.vehicle", h.heads)?;
    let lane = pv.block("encoder.lane", h.heads)?;
    let (cv, cl) = (h.vehicle_encoder_cfg(), h.lane_encoder_cfg());
    let va = attention_block(g, vehicles, vehicles, vehicles, vehicle_valid, &cv, &veh, h.p_drop, h.ln_epsilon, mode, rng)?;
    let la = attention_block(g, vehicles, lanes, lanes, lane_valid, &cl, &lane, h.p_drop, h.ln_epsilon, mode, rng)?;
    let axis = g.value(va.output).rank() - 1;
    let z = g.concat(&[va.output, la.output], axis)?;
    Ok(EncoderOutput { z, vehicle_weights: va.weights, lane_weights: la.weights })
}

pub fn decode<R: Rng + ?Sized>(
    g: &mut Graph,
    h: &Hyperparams,
    pv: &ParamVars,
    z: Var,
    vehicle_valid: &[bool],
    mode: Mode,
    rng: &mut R,
) -> Result<AttentionOutput> {
    let dec = pv.block("decoder.vehicle", h.heads)?;
    attention_block(g, z, z, z, vehicle_valid, &h.decoder_cfg(), &dec, h.p_drop, h.ln_epsilon, mode, rng)
}

/// Raw head outputs `[.., n, 5·t_pred]` ordered `(μx, μy, a, b, c)` per step.
pub fn gaussian_head(g: &mut Graph, dec: Var, pv: &ParamVars) -> Result<Var> {
    checked_affine(g, dec, pv.get("head.w")?, pv.get("head.b")?, "gaussian head")
}

/// Graph handles produced by one batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchForward {
    /// `[B, n, 5·t_pred]`
    pub head: Var,
    /// `[B, n, t_pred, 2]` meters added to the raw means.
    pub anchor: Vec<f64>,
    pub encoder: EncoderOutput,
    pub decoder_weights: Vec<Var>,
}

pub fn forward_batch<R: Rng + ?Sized>(
    g: &mut Graph,
    h: &Hyperparams,
    pv: &ParamVars,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<BatchForward> {
    if batch.t_obs != h.t_obs || batch.t_pred != h.t_pred {
        return Err(Error::Dimension(format!(
            "batch horizon ({}, {}) but model expects ({}, {})",
            batch.t_obs, batch.t_pred, h.t_obs, h.t_pred
        )));
    }
    let b = batch.size();
    let vehicles = g.input(Tensor::new(vec![b, batch.n, h.vehicle_input_dim()], vehicle_features(h, batch))?);
    let lanes = g.input(Tensor::new(vec![b, batch.m, LANE_FEATURES], lane_features(h, batch))?);
    let ve = embed_vehicle(g, vehicles, pv)?;
    let le = embed_lane(g, lanes, pv)?;
    let encoder = encode(g, h, pv, ve, le, &batch.vehicle_valid, &batch.lane_valid, mode, rng)?;
    let dec = decode(g, h, pv, encoder.z, &batch.vehicle_valid, mode, rng)?;
    let head = gaussian_head(g, dec.output, pv)?;
    Ok(BatchForward { head, anchor: batch_anchor(h, batch), encoder, decoder_weights: dec.weights })
}

fn trim_record(g: &Graph, layer: LayerTag, weights: &[Var], bi: usize, n_q: usize, n_k: usize) -> Result<AttentionRecord> {
    let heads = weights
        .iter()
        .map(|&w| {
            let t = g.value(w);
            let (q_all, k_all) = (t.shape()[1], t.shape()[2]);
            let base = bi * q_all * k_all;
            let data = (0..n_q)
                .flat_map(|q| t.data()[base + q * k_all..base + q * k_all + n_k].iter().copied())
                .collect();
            Tensor::new(vec![n_q, n_k], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionRecord { layer, heads })
}

/// Per-scene forecasts and attention records from an evaluated batch,
/// trimmed to each scene's own vehicle and lane slots.
pub fn extract_scenes(
    g: &Graph,
    h: &Hyperparams,
    batch: &Batch,
    fwd: &BatchForward,
) -> Result<Vec<(GaussianForecast, Vec<AttentionRecord>)>> {
    let width = h.head_out_dim();
    let raw = g.value(fwd.head).data();
    let t_pred = h.t_pred;
    (0..batch.size())
        .map(|bi| {
            let (sn, sm) = batch.slots[bi];
            let start = bi * batch.n;
            let raw_s = &raw[start * width..(start + sn) * width];
            let anchor_s = &fwd.anchor[start * t_pred * 2..(start + sn) * t_pred * 2];
            let forecast = GaussianForecast::from_raw(raw_s, anchor_s, sn, t_pred, h.sigma_floor)?;
            let records = vec![
                trim_record(g, LayerTag::VehicleEncoder, &fwd.encoder.vehicle_weights, bi, sn, sn)?,
                trim_record(g, LayerTag::LaneEncoder, &fwd.encoder.lane_weights, bi, sn, sm)?,
                trim_record(g, LayerTag::VehicleDecoder, &fwd.decoder_weights, bi, sn, sn)?,
            ];
            Ok((forecast, records))
        })
        .collect()
}

/// Hyperparameters plus parameter values: everything needed to predict.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub hyper: Hyperparams,
    pub params: ParamStore,
}

/// Scenes evaluated together in one graph by [`Model::predict`].
pub const EVAL_CHUNK: usize = 32;

impl Model {
    pub fn init(hyper: Hyperparams, seed: u64) -> Result<Self> {
        let params = init_params(&hyper, seed)?;
        Ok(Self { hyper, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// Eval-mode forecasts and attention records for a group of scenes.
    pub fn forward_scenes(&self, scenes: &[&Scene]) -> Result<Vec<(GaussianForecast, Vec<AttentionRecord>)>> {
        let batch = Batch::from_scenes(scenes, true)?;
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &self.params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = forward_batch(&mut g, &self.hyper, &pv, &batch, Mode::Eval, &mut rng)?;
        extract_scenes(&g, &self.hyper, &batch, &fwd)
    }

    /// Eval-mode forward of one scene.
    pub fn forward(&self, scene: &Scene) -> Result<(GaussianForecast, Vec<AttentionRecord>)> {
        Ok(self.forward_scenes(&[scene])?.pop().expect("one scene"))
    }

    /// Eval-mode forecasts for every scene, in input order. Results do not
    /// depend on how scenes are grouped or on the thread count.
    pub fn predict(&self, scenes: &[Scene]) -> Result<Vec<GaussianForecast>> {
        let chunks: Vec<Vec<&Scene>> = scenes.chunks(EVAL_CHUNK).map(|c| c.iter().collect()).collect();
        let parts = chunks
            .par_iter()
            .map(|c| self.forward_scenes(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().map(|(f, _)| f).collect())
    }
}
