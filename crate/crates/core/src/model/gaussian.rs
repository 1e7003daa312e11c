//! Per-step bivariate Gaussian forecasts and their Cholesky parametrisation.
//!
//! The head emits five raw numbers per vehicle and future step:
//! `(μx, μy, a, b, c)`. The covariance is
//! `Σ = L Lᵀ + σ_floor² I` with `L = [[softplus(a), 0], [c, softplus(b)]]`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const RAW_PER_STEP: usize = 5;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Upper triangle `(Σ11, Σ12, Σ22)` from raw Cholesky parameters.
///
/// The diagonal is rounded up and the off-diagonal towards zero, so the
/// stored matrix minus `σ_floor²·I` is positive semi-definite exactly, not
/// only up to rounding.
pub fn covariance_from_chol(a: f64, b: f64, c: f64, sigma_floor: f64) -> [f64; 3] {
    let (la, lb) = (softplus(a), softplus(b));
    let floor2 = sigma_floor * sigma_floor;
    let s11 = la.mul_add(la, floor2).next_up();
    let s22 = c.mul_add(c, lb.mul_add(lb, floor2)).next_up().next_up();
    let p = la * c;
    let s12 = if p > 0.0 { p.next_down() } else if p < 0.0 { p.next_up() } else { 0.0 };
    [s11, s12, s22]
}

/// `-log N(y | μ, Σ)` for a 2-D Gaussian, Σ given by its upper triangle.
pub fn neg_log_density(mu: [f64; 2], s: [f64; 3], y: [f64; 2]) -> f64 {
    let det = s[0] * s[2] - s[1] * s[1];
    let (r1, r2) = (y[0] - mu[0], y[1] - mu[1]);
    let quad = (s[2] * r1 * r1 - 2.0 * s[1] * r1 * r2 + s[0] * r2 * r2) / det;
    (2.0 * PI).ln() + 0.5 * det.ln() + 0.5 * quad
}

/// Squared Mahalanobis distance `(y-μ)ᵀ Σ⁻¹ (y-μ)`.
pub fn mahalanobis2(mu: [f64; 2], s: [f64; 3], y: [f64; 2]) -> f64 {
    let det = s[0] * s[2] - s[1] * s[1];
    let (r1, r2) = (y[0] - mu[0], y[1] - mu[1]);
    (s[2] * r1 * r1 - 2.0 * s[1] * r1 * r2 + s[0] * r2 * r2) / det
}

/// Negative log density and its gradient with respect to the five raw head
/// outputs `(μx, μy, a, b, c)`; `anchor` is added to the raw mean.
pub fn nll_raw_with_grad(raw: &[f64], anchor: [f64; 2], y: [f64; 2], sigma_floor: f64) -> (f64, [f64; 5]) {
    let (a, b, c) = (raw[2], raw[3], raw[4]);
    let mu = [anchor[0] + raw[0], anchor[1] + raw[1]];
    let (la, lb) = (softplus(a), softplus(b));
    let s = covariance_from_chol(a, b, c, sigma_floor);
    let det = s[0] * s[2] - s[1] * s[1];
    let (r1, r2) = (y[0] - mu[0], y[1] - mu[1]);
    let num = s[2] * r1 * r1 - 2.0 * s[1] * r1 * r2 + s[0] * r2 * r2;
    let value = (2.0 * PI).ln() + 0.5 * det.ln() + 0.5 * num / det;

    let det2 = det * det;
    let d_s11 = 0.5 * s[2] / det + 0.5 * (r2 * r2 / det - num * s[2] / det2);
    let d_s22 = 0.5 * s[0] / det + 0.5 * (r1 * r1 / det - num * s[0] / det2);
    let d_s12 = -s[1] / det + (-r1 * r2 / det + num * s[1] / det2);
    let d_r1 = (s[2] * r1 - s[1] * r2) / det;
    let d_r2 = (s[0] * r2 - s[1] * r1) / det;

    let d_a = (d_s11 * 2.0 * la + d_s12 * c) * sigmoid(a);
    let d_b = d_s22 * 2.0 * lb * sigmoid(b);
    let d_c = d_s12 * la + d_s22 * 2.0 * c;
    (value, [-d_r1, -d_r2, d_a, d_b, d_c])
}

/// Bivariate Gaussians for `n` vehicles over `t_pred` future steps.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianForecast {
    pub n: usize,
    pub t_pred: usize,
    /// `[n, t_pred, 2]` meters, ego frame.
    pub mu: Vec<f64>,
    /// `[n, t_pred, 3]` raw Cholesky parameters, absent for forecasts built
    /// from moments directly.
    pub chol: Option<Vec<f64>>,
    /// `[n, t_pred, 2, 2]` square meters.
    pub sigma: Vec<f64>,
}

impl GaussianForecast {
    /// Assembles a forecast from raw head outputs `[n, t_pred, 5]` plus the
    /// per-step mean anchor `[n, t_pred, 2]`.
    pub fn from_raw(raw: &[f64], anchor: &[f64], n: usize, t_pred: usize, sigma_floor: f64) -> Result<Self> {
        let steps = n * t_pred;
        if raw.len() != steps * RAW_PER_STEP || anchor.len() != steps * 2 {
            return Err(Error::Dimension(format!(
                "raw head output of {} / anchor of {} for {n}×{t_pred} steps",
                raw.len(),
                anchor.len()
            )));
        }
        let mut mu = Vec::with_capacity(steps * 2);
        let mut chol = Vec::with_capacity(steps * 3);
        let mut sigma = Vec::with_capacity(steps * 4);
        for k in 0..steps {
            let r = &raw[k * RAW_PER_STEP..(k + 1) * RAW_PER_STEP];
            mu.push(anchor[2 * k] + r[0]);
            mu.push(anchor[2 * k + 1] + r[1]);
            chol.extend_from_slice(&r[2..5]);
            let [s11, s12, s22] = covariance_from_chol(r[2], r[3], r[4], sigma_floor);
            sigma.extend_from_slice(&[s11, s12, s12, s22]);
        }
        Ok(Self { n, t_pred, mu, chol: Some(chol), sigma })
    }

    /// Forecast from explicit means and covariances; every Σ must be
    /// symmetric positive-definite.
    pub fn from_moments(n: usize, t_pred: usize, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != n * t_pred * 2 || sigma.len() != n * t_pred * 4 {
            return Err(Error::Dimension(format!(
                "mean of {} / covariance of {} for {n}×{t_pred} steps",
                mu.len(),
                sigma.len()
            )));
        }
        for k in 0..n * t_pred {
            let s = &sigma[4 * k..4 * k + 4];
            if s[1] != s[2] || !(s[0] > 0.0) || !(s[0] * s[3] - s[1] * s[2] > 0.0) {
                return Err(Error::Parameter(format!("covariance {k} is not symmetric positive-definite: {s:?}")));
            }
        }
        Ok(Self { n, t_pred, mu, chol: None, sigma })
    }

    pub fn mean(&self, i: usize, t: usize) -> [f64; 2] {
        let o = (i * self.t_pred + t) * 2;
        [self.mu[o], self.mu[o + 1]]
    }

    /// Upper triangle `(Σ11, Σ12, Σ22)`.
    pub fn cov(&self, i: usize, t: usize) -> [f64; 3] {
        let o = (i * self.t_pred + t) * 4;
        [self.sigma[o], self.sigma[o + 1], self.sigma[o + 3]]
    }

    pub fn cov_matrix(&self, i: usize, t: usize) -> [[f64; 2]; 2] {
        let o = (i * self.t_pred + t) * 4;
        [[self.sigma[o], self.sigma[o + 1]], [self.sigma[o + 2], self.sigma[o + 3]]]
    }

    pub fn trace(&self, i: usize, t: usize) -> f64 {
        let [a, _, c] = self.cov(i, t);
        a + c
    }

    /// Reorders vehicles: new row `j` is old row `perm[j]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let gather = |src: &[f64], w: usize| -> Vec<f64> {
            perm.iter().flat_map(|&p| src[p * w..(p + 1) * w].iter().copied()).collect()
        };
        let t = self.t_pred;
        Self {
            n: perm.len(),
            t_pred: t,
            mu: gather(&self.mu, t * 2),
            chol: self.chol.as_ref().map(|c| gather(c, t * 3)),
            sigma: gather(&self.sigma, t * 4),
        }
    }
}

/// Eigenvalues of a symmetric 2×2 matrix, ascending.
///
/// The smaller one is `det / λ_max` with the determinant evaluated by
/// Kahan's fused-multiply-add scheme, so it keeps full relative accuracy
/// when the two eigenvalues differ by many orders of magnitude.
pub fn sym2_eigenvalues(s: [f64; 3]) -> [f64; 2] {
    let mean = 0.5 * (s[0] + s[2]);
    let half_diff = 0.5 * (s[0] - s[2]);
    let rad = half_diff.hypot(s[1]);
    let hi = mean + rad;
    if !(mean > 0.0) || hi == 0.0 {
        return [mean - rad, hi];
    }
    let off2 = s[1] * s[1];
    let off2_err = s[1].mul_add(s[1], -off2);
    let det = s[0].mul_add(s[2], -off2) - off2_err;
    [det / hi, hi]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FLOOR: f64 = 0.01;

    #[test]
    fn zero_raw_gives_isotropic_ln2_squared() {
        let s = covariance_from_chol(0.0, 0.0, 0.0, FLOOR);
        let expect = 2f64.ln().powi(2) + FLOOR * FLOOR;
        assert!((expect - (0.4805 + FLOOR * FLOOR)).abs() < 1e-4);
        assert!((s[0] - expect).abs() < 1e-15 && (s[2] - expect).abs() < 1e-15);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn forecast_sigma_is_exactly_symmetric() {
        let raw = [0.1, 0.2, -0.3, 1.2, 0.77, 0.0, 0.0, 2.0, -4.0, -1.5];
        let f = GaussianForecast::from_raw(&raw, &[0.0; 4], 1, 2, FLOOR).unwrap();
        for t in 0..2 {
            let m = f.cov_matrix(0, t);
            assert_eq!(m[0][1].to_bits(), m[1][0].to_bits());
        }
    }

    #[test]
    fn determinant_bounded_below_over_random_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let (a, b, c) = (rng.random_range(-12.0..6.0), rng.random_range(-12.0..6.0), rng.random_range(-5.0..5.0));
            let s = covariance_from_chol(a, b, c, FLOOR);
            let [lo, hi] = sym2_eigenvalues(s);
            assert!(lo >= FLOOR * FLOOR * (1.0 - 1e-9), "{lo}");
            assert!(lo * hi >= FLOOR.powi(4) * (1.0 - 1e-9));
        }
    }

    #[test]
    fn nll_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let anchor = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let y = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let (v, g) = nll_raw_with_grad(&raw, anchor, y, FLOOR);
            let mu = [anchor[0] + raw[0], anchor[1] + raw[1]];
            let direct = neg_log_density(mu, covariance_from_chol(raw[2], raw[3], raw[4], FLOOR), y);
            assert!((v - direct).abs() < 1e-12);
            for k in 0..5 {
                let h = 1e-5;
                let mut up = raw.clone();
                up[k] += h;
                let mut dn = raw.clone();
                dn[k] -= h;
                let num = (nll_raw_with_grad(&up, anchor, y, FLOOR).0 - nll_raw_with_grad(&dn, anchor, y, FLOOR).0) / (2.0 * h);
                assert!((num - g[k]).abs() <= 1e-5 * (1.0 + num.abs()), "k={k}: {num} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn from_moments_rejects_non_pd() {
        assert!(GaussianForecast::from_moments(1, 1, vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0]).is_ok());
        assert!(GaussianForecast::from_moments(1, 1, vec![0.0; 2], vec![1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(GaussianForecast::from_moments(1, 1, vec![0.0; 2], vec![1.0, 0.1, 0.0, 1.0]).is_err());
    }
}
