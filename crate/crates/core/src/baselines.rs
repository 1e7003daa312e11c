//! Constant-velocity Kalman extrapolation, the "linear" reference forecaster.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::model::GaussianForecast;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanCvConfig {
    /// Acceleration noise standard deviation, m/s².
    pub q: f64,
    /// Position measurement noise standard deviation, m.
    pub r: f64,
    /// Seconds between samples.
    pub dt: f64,
}

impl Default for KalmanCvConfig {
    fn default() -> Self {
        Self { q: 0.5, r: 0.1, dt: 0.2 }
    }
}

impl KalmanCvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.r > 0.0 && self.dt > 0.0) {
            return Err(Error::Parameter(format!("Kalman settings must be positive: {self:?}")));
        }
        Ok(())
    }

    fn transition(&self) -> Matrix4<f64> {
        let dt = self.dt;
        Matrix4::new(
            1.0, 0.0, dt, 0.0, //
            0.0, 1.0, 0.0, dt, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    /// White-noise-acceleration process covariance.
    fn process_noise(&self) -> Matrix4<f64> {
        let (dt, q2) = (self.dt, self.q * self.q);
        let (a, b, c) = (dt.powi(4) / 4.0 * q2, dt.powi(3) / 2.0 * q2, dt * dt * q2);
        Matrix4::new(
            a, 0.0, b, 0.0, //
            0.0, a, 0.0, b, //
            b, 0.0, c, 0.0, //
            0.0, b, 0.0, c,
        )
    }
}

/// Predicted means `[t_pred, 2]` and position covariances `[t_pred, 2, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanPrediction {
    pub mean: Vec<[f64; 2]>,
    pub cov: Vec<[[f64; 2]; 2]>,
}

/// Filters the observed `[t_obs, 2]` past with a constant-velocity model,
/// then propagates `t_pred` steps without measurements.
pub fn kalman_cv_predict(past: &[f64], cfg: &KalmanCvConfig, t_pred: usize) -> Result<KalmanPrediction> {
    cfg.validate()?;
    if !past.len().is_multiple_of(2) || past.len() < 4 {
        return Err(Error::Dimension(format!("need at least two observed points, got {} values", past.len())));
    }
    let t_obs = past.len() / 2;
    let point = |t: usize| Vector2::new(past[2 * t], past[2 * t + 1]);
    let (f, q) = (cfg.transition(), cfg.process_noise());
    let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let r2 = cfg.r * cfg.r;
    let r = Matrix2::identity() * r2;

    let (p0, p1) = (point(0), point(1));
    let v = (p1 - p0) / cfg.dt;
    let mut x = Vector4::new(p1.x, p1.y, v.x, v.y);
    let (pv, vv) = (r2 / cfg.dt, 2.0 * r2 / (cfg.dt * cfg.dt));
    let mut p = Matrix4::new(
        r2, 0.0, pv, 0.0, //
        0.0, r2, 0.0, pv, //
        pv, 0.0, vv, 0.0, //
        0.0, pv, 0.0, vv,
    );
    for t in 2..t_obs {
        x = f * x;
        p = f * p * f.transpose() + q;
        let s = h * p * h.transpose() + r;
        let s_inv = s.try_inverse().ok_or_else(|| Error::Invariant("innovation covariance is singular".into()))?;
        let k = p * h.transpose() * s_inv;
        x += k * (point(t) - h * x);
        let i_kh = Matrix4::identity() - k * h;
        p = i_kh * p * i_kh.transpose() + k * r * k.transpose();
    }
    let mut mean = Vec::with_capacity(t_pred);
    let mut cov = Vec::with_capacity(t_pred);
    for _ in 0..t_pred {
        x = f * x;
        p = f * p * f.transpose() + q;
        mean.push([x[0], x[1]]);
        let c01 = 0.5 * (p[(0, 1)] + p[(1, 0)]);
        cov.push([[p[(0, 0)], c01], [c01, p[(1, 1)]]]);
    }
    Ok(KalmanPrediction { mean, cov })
}

/// Kalman forecast for every vehicle slot of a scene. Padded slots get the
/// forecast of an all-zero past.
pub fn kalman_forecast(scene: &Scene, cfg: &KalmanCvConfig) -> Result<GaussianForecast> {
    let cfg = KalmanCvConfig { dt: scene.dt, ..*cfg };
    let n = scene.n_slots();
    let mut mu = Vec::with_capacity(n * scene.t_pred * 2);
    let mut sigma = Vec::with_capacity(n * scene.t_pred * 4);
    for i in 0..n {
        let pred = kalman_cv_predict(scene.past_of(i), &cfg, scene.t_pred)?;
        for (m, c) in pred.mean.iter().zip(&pred.cov) {
            mu.extend_from_slice(m);
            sigma.extend_from_slice(&[c[0][0], c[0][1], c[1][0], c[1][1]]);
        }
    }
    GaussianForecast::from_moments(n, scene.t_pred, mu, sigma)
}

pub fn kalman_forecasts(scenes: &[Scene], cfg: &KalmanCvConfig) -> Result<Vec<GaussianForecast>> {
    scenes.iter().map(|s| kalman_forecast(s, cfg)).collect()
}
