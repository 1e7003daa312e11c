//! Central finite-difference checks of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<usize>,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `eval` at the listed
/// coordinates of `x`.
///
/// `eval` must be deterministic: it is run twice at `x` first and any
/// disagreement is a contract error.
pub fn finite_difference_check<F>(
    mut eval: F,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != x.len() {
        return Err(Error::Dimension(format!(
            "analytic gradient has {} entries for {} coordinates",
            analytic.len(),
            x.len()
        )));
    }
    let f0 = eval(x)?;
    let f1 = eval(x)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {f0} vs {f1} at identical input"
        )));
    }
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        tol,
        passed: true,
    };
    for &i in coords {
        if i >= x.len() {
            return Err(Error::Dimension(format!("coordinate {i} out of range {}", x.len())));
        }
        probe[i] = x[i] + step;
        let up = eval(&probe)?;
        probe[i] = x[i] - step;
        let down = eval(&probe)?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        let rel = relative_error(analytic[i], numeric);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some(i);
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// Checks every coordinate of `x` for a scalar function built on a graph.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic = g.grad(leaf).expect("leaf requires grad").to_vec();
    let shape = x.shape().to_vec();
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_difference_check(
        |values| {
            let mut g = Graph::new();
            let leaf = g.input(Tensor::new(shape.clone(), values.to_vec())?);
            let out = f(&mut g, leaf)?;
            g.value(out).item()
        },
        x.data(),
        &analytic,
        &coords,
        step,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-3;
    const TOL: f64 = 1e-4;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Weighted sum with fixed pseudo-random weights, so gradients are not
    /// trivially uniform.
    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_tensor(&mut rng, g.value(y).shape());
        let w = g.input(w);
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    #[test]
    fn sum_has_zero_discrepancy() {
        let x = Tensor::vector(&[0.3, -1.2, 4.0]);
        let r = grad_check(|g, x| g.sum(x), &x, STEP, TOL).unwrap();
        assert!(r.passed);
        assert!(r.max_abs_error < 1e-9);
    }

    #[test]
    fn softmax_then_sum_is_constant() {
        let x = Tensor::matrix(&[&[0.1, 2.0, -1.0], &[0.5, 0.5, 0.0]]);
        let r = grad_check(
            |g, x| {
                let s = g.softmax(x, 1)?;
                g.sum(s)
            },
            &x,
            STEP,
            TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_abs_error < 1e-9);
    }

    #[test]
    fn nondeterministic_function_is_a_contract_error() {
        let mut calls = 0u32;
        let err = finite_difference_check(
            |x| {
                calls += 1;
                Ok(x[0] + calls as f64)
            },
            &[1.0],
            &[1.0],
            &[0],
            STEP,
            TOL,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    // Analytic vs central differences for every primitive, 100 random inputs each.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..100u64 {
            let a = random_tensor(&mut rng, &[2, 3, 4]);
            // Slices with near-zero variance make layer-norm third derivatives
            // explode, so its inputs are drawn with a wider spread.
            let wide = Tensor::new(vec![2, 3, 4], a.data().iter().map(|v| 5.0 * v).collect()).unwrap();
            let b = random_tensor(&mut rng, &[2, 4, 2]);
            let w = random_tensor(&mut rng, &[4, 3]);
            let bias = random_tensor(&mut rng, &[3]);
            let gain = random_tensor(&mut rng, &[4]);
            let seed = 1000 + trial;
            let cases: Vec<(&str, GradCheckReport)> = vec![
                (
                    "matmul-lhs",
                    grad_check(|g, x| { let bb = g.input(b.clone()); let y = g.matmul(x, bb)?; weighted_sum(g, y, seed) }, &a, STEP, TOL).unwrap(),
                ),
                (
                    "matmul-rhs",
                    grad_check(|g, x| { let aa = g.input(a.clone()); let y = g.matmul(aa, x)?; weighted_sum(g, y, seed) }, &b, STEP, TOL).unwrap(),
                ),
                (
                    "matmul-broadcast-rhs",
                    grad_check(|g, x| { let aa = g.input(a.clone()); let y = g.matmul(aa, x)?; weighted_sum(g, y, seed) }, &w, STEP, TOL).unwrap(),
                ),
                (
                    "transpose",
                    grad_check(|g, x| { let y = g.transpose(x)?; weighted_sum(g, y, seed) }, &a, STEP, TOL).unwrap(),
                ),
                (
                    "softmax",
                    grad_check(|g, x| { let y = g.softmax(x, 2)?; weighted_sum(g, y, seed) }, &a, STEP, TOL).unwrap(),
                ),
                (
                    "softmax-axis1",
                    grad_check(|g, x| { let y = g.softmax(x, 1)?; weighted_sum(g, y, seed) }, &a, STEP, TOL).unwrap(),
                ),
                (
                    "layer_norm-x",
                    grad_check(|g, x| {
                        let gg = g.input(gain.clone());
                        let bb = g.input(Tensor::vector(&[0.1, -0.2, 0.3, 0.0]));
                        let y = g.layer_norm(x, gg, bb, 1e-6)?;
                        weighted_sum(g, y, seed)
                    }, &wide, STEP, TOL).unwrap(),
                ),
                (
                    "layer_norm-gain",
                    grad_check(|g, x| {
                        let aa = g.input(a.clone());
                        let bb = g.input(Tensor::zeros(&[4]));
                        let y = g.layer_norm(aa, x, bb, 1e-6)?;
                        weighted_sum(g, y, seed)
                    }, &gain, STEP, TOL).unwrap(),
                ),
                (
                    "affine-x",
                    grad_check(|g, x| { let ww = g.input(w.clone()); let bb = g.input(bias.clone()); let y = g.affine(x, ww, bb)?; weighted_sum(g, y, seed) }, &a, STEP, TOL).unwrap(),
                ),
                (
                    "affine-w",
                    grad_check(|g, x| { let aa = g.input(a.clone()); let bb = g.input(bias.clone()); let y = g.affine(aa, x, bb)?; weighted_sum(g, y, seed) }, &w, STEP, TOL).unwrap(),
                ),
                (
                    "affine-b",
                    grad_check(|g, x| { let aa = g.input(a.clone()); let ww = g.input(w.clone()); let y = g.affine(aa, ww, x)?; weighted_sum(g, y, seed) }, &bias, STEP, TOL).unwrap(),
                ),
                (
                    "concat",
                    grad_check(|g, x| { let bb = g.input(a.clone()); let y = g.concat(&[x, bb, x], 2)?; weighted_sum(g, y, seed) }, &a, STEP, TOL).unwrap(),
                ),
                (
                    "add-mul-scale",
                    grad_check(|g, x| { let y = g.mul(x, x)?; let z = g.add(y, x)?; let s = g.scale(z, -0.7)?; weighted_sum(g, s, seed) }, &a, STEP, TOL).unwrap(),
                ),
                (
                    "mask-softmax",
                    grad_check(|g, x| {
                        let m = g.mask_keys(x, &[true, false, true, true, true, true, false, true])?;
                        let y = g.softmax(m, 2)?;
                        weighted_sum(g, y, seed)
                    }, &a, STEP, TOL).unwrap(),
                ),
                (
                    "dropout-train",
                    grad_check(|g, x| {
                        let mut r = ChaCha8Rng::seed_from_u64(seed);
                        let y = g.dropout(x, 0.5, Mode::Train, &mut r)?;
                        weighted_sum(g, y, seed)
                    }, &a, STEP, TOL).unwrap(),
                ),
            ];
            for (name, r) in cases {
                assert!(r.passed, "trial {trial} {name}: {r:?}");
            }
        }
    }
}
