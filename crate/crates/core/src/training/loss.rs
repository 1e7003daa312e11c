//! Negative log-likelihood and reconstruction losses.
//!
//! Both average over valid vehicles within a scene. The batched graph
//! version further averages over scenes that contain at least one target.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{neg_log_density, nll_raw_with_grad, GaussianForecast, RAW_PER_STEP};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub nll: f64,
    pub recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { nll: 1.0, recon: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.nll >= 0.0 && self.recon >= 0.0 && self.nll.is_finite() && self.recon.is_finite()) {
            return Err(Error::Parameter(format!("loss weights must be non-negative: {self:?}")));
        }
        if self.nll == 0.0 && self.recon == 0.0 {
            return Err(Error::Parameter("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

fn check(forecast: &GaussianForecast, truth: &[f64], mask: &[bool]) -> Result<usize> {
    if mask.len() != forecast.n || truth.len() != forecast.n * forecast.t_pred * 2 {
        return Err(Error::Dimension(format!(
            "truth of {} values and mask of {} for a {}×{} forecast",
            truth.len(),
            mask.len(),
            forecast.n,
            forecast.t_pred
        )));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::Parameter("loss needs at least one valid vehicle".into()));
    }
    Ok(valid)
}

/// `-(1/N_valid) Σ_i Σ_t log N(y_it | μ_it, Σ_it)`
pub fn nll_loss(forecast: &GaussianForecast, truth: &[f64], mask: &[bool]) -> Result<f64> {
    let valid = check(forecast, truth, mask)?;
    let mut total = 0.0;
    for i in (0..forecast.n).filter(|&i| mask[i]) {
        for t in 0..forecast.t_pred {
            let s = forecast.cov(i, t);
            if !(s[0] > 0.0 && s[0] * s[2] - s[1] * s[1] > 0.0) {
                return Err(Error::Invariant(format!("covariance of vehicle {i} step {t} is not positive-definite")));
            }
            let o = (i * forecast.t_pred + t) * 2;
            total += neg_log_density(forecast.mean(i, t), s, [truth[o], truth[o + 1]]);
        }
    }
    Ok(total / valid as f64)
}

/// `(1/N_valid) Σ_i ‖Y_i − μ_i‖` over the flattened `t_pred × 2` residual.
pub fn recon_loss(forecast: &GaussianForecast, truth: &[f64], mask: &[bool]) -> Result<f64> {
    let valid = check(forecast, truth, mask)?;
    let w = forecast.t_pred * 2;
    let total: f64 = (0..forecast.n)
        .filter(|&i| mask[i])
        .map(|i| {
            let r = forecast.mu[i * w..(i + 1) * w].iter().zip(&truth[i * w..(i + 1) * w]);
            r.map(|(m, y)| (y - m) * (y - m)).sum::<f64>().sqrt()
        })
        .sum();
    Ok(total / valid as f64)
}

pub fn total_loss(forecast: &GaussianForecast, truth: &[f64], mask: &[bool], w: LossWeights) -> Result<f64> {
    w.validate()?;
    let mut total = 0.0;
    if w.nll != 0.0 {
        total += w.nll * nll_loss(forecast, truth, mask)?;
    }
    if w.recon != 0.0 {
        total += w.recon * recon_loss(forecast, truth, mask)?;
    }
    Ok(total)
}

/// Loss components of one batch, each averaged like the total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub recon: f64,
    pub total: f64,
}

/// Weighted batch loss on the raw head output `[B, n, 5·t_pred]`, recorded
/// on `g` as one fused node.
pub fn batch_loss(
    g: &mut Graph,
    head: Var,
    anchor: &[f64],
    batch: &Batch,
    w: LossWeights,
    sigma_floor: f64,
) -> Result<(Var, LossParts)> {
    w.validate()?;
    let t_pred = batch.t_pred;
    let width = t_pred * RAW_PER_STEP;
    let slots = batch.size() * batch.n;
    if g.value(head).len() != slots * width || anchor.len() != slots * t_pred * 2 {
        return Err(Error::Dimension(format!(
            "head output {:?} / anchor {} for batch of {slots} slots",
            g.value(head).shape(),
            anchor.len()
        )));
    }
    let scored: Vec<(usize, usize)> = (0..batch.size())
        .map(|b| (b, batch.target_valid[b * batch.n..(b + 1) * batch.n].iter().filter(|&&v| v).count()))
        .filter(|&(_, c)| c > 0)
        .collect();
    if scored.is_empty() {
        return Err(Error::Parameter("batch has no vehicle to score".into()));
    }
    let raw = g.value(head).data();
    let mut grad = vec![0.0; raw.len()];
    let mut parts = LossParts::default();
    let n_scenes = scored.len() as f64;
    for &(b, valid) in &scored {
        let per_vehicle = 1.0 / (valid as f64 * n_scenes);
        for i in 0..batch.n {
            let slot = b * batch.n + i;
            if !batch.target_valid[slot] {
                continue;
            }
            let mut sq = 0.0;
            let mut resid = Vec::with_capacity(t_pred * 2);
            for t in 0..t_pred {
                let o = slot * t_pred + t;
                let r = &raw[o * RAW_PER_STEP..(o + 1) * RAW_PER_STEP];
                let a = [anchor[2 * o], anchor[2 * o + 1]];
                let y = [batch.future[2 * o], batch.future[2 * o + 1]];
                let (v, dv) = nll_raw_with_grad(r, a, y, sigma_floor);
                parts.nll += v * per_vehicle;
                for (gk, d) in grad[o * RAW_PER_STEP..(o + 1) * RAW_PER_STEP].iter_mut().zip(dv) {
                    *gk += w.nll * per_vehicle * d;
                }
                let e = [y[0] - a[0] - r[0], y[1] - a[1] - r[1]];
                sq += e[0] * e[0] + e[1] * e[1];
                resid.push(e);
            }
            let norm = sq.sqrt();
            parts.recon += norm * per_vehicle;
            if norm > 0.0 {
                for (t, e) in resid.iter().enumerate() {
                    let o = (slot * t_pred + t) * RAW_PER_STEP;
                    grad[o] -= w.recon * per_vehicle * e[0] / norm;
                    grad[o + 1] -= w.recon * per_vehicle * e[1] / norm;
                }
            }
        }
    }
    parts.total = w.nll * parts.nll + w.recon * parts.recon;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("batch_loss"));
    }
    let loss = g.reduce_with_grad(head, parts.total, grad)?;
    Ok((loss, parts))
}
