use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// Default global-norm threshold when clipping is switched on.
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::Parameter(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Moments rounded through 32-bit storage.
    pub fn rounded_to_f32(&self) -> Self {
        let round = |map: &BTreeMap<String, Vec<f64>>| {
            map.iter().map(|(k, v)| (k.clone(), v.iter().map(|&x| x as f32 as f64).collect())).collect()
        };
        Self { config: self.config, step: self.step, m: round(&self.m), v: round(&self.v) }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, state: &mut AdamState) -> Result<()> {
    let cfg = state.config;
    cfg.validate()?;
    for (name, t) in params.iter() {
        match grads.get(name) {
            None => return Err(Error::Contract(format!("no gradient for parameter `{name}`"))),
            Some(g) if g.len() != t.len() => {
                return Err(Error::Contract(format!("gradient for `{name}` has {} values, expected {}", g.len(), t.len())))
            }
            Some(_) => {}
        }
        if state.m.get(name).map(Vec::len) != Some(t.len()) || state.v.get(name).map(Vec::len) != Some(t.len()) {
            return Err(Error::Contract(format!("optimizer state does not cover parameter `{name}`")));
        }
    }
    let clip = match cfg.clip_norm {
        Some(c) => {
            let norm = global_norm(grads);
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (name, t) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("checked");
        let v = state.v.get_mut(name).expect("checked");
        for (k, p) in t.data_mut().iter_mut().enumerate() {
            let gk = g[k] * clip;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
