//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use num::{BigRational, Signed};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trajattn::data::{synth_generate, synth_scenes, Batch, Scene, SynthConfig, SyntheticScene};
use trajattn::graph::{finite_difference_check, GradCheckReport, Graph, Mode};
use trajattn::model::{forward_batch, Model, ParamVars};
use trajattn::training::{batch_loss, gradients, LossWeights};
use trajattn::Result;

pub fn synth_cfg(n_scenes: usize, n_min: usize, n_max: usize) -> SynthConfig {
    SynthConfig { n_scenes, n_vehicles_min: n_min, n_vehicles_max: n_max, ..SynthConfig::default() }
}

pub fn scenes(n_scenes: usize, n_min: usize, n_max: usize, seed: u64) -> Vec<Scene> {
    synth_scenes(&synth_cfg(n_scenes, n_min, n_max), seed).unwrap()
}

pub fn synthetic(cfg: &SynthConfig, seed: u64) -> Vec<SyntheticScene> {
    synth_generate(cfg, seed).unwrap()
}

/// Eval-mode weighted batch loss.
pub fn eval_loss(model: &Model, batch: &Batch, w: LossWeights) -> Result<f64> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, &model.params, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = forward_batch(&mut g, &model.hyper, &pv, batch, Mode::Eval, &mut rng)?;
    let (loss, _) = batch_loss(&mut g, fwd.head, &fwd.anchor, batch, w, model.hyper.sigma_floor)?;
    g.value(loss).item()
}

/// Layer families a full-model gradient check samples from.
pub const FAMILIES: [&str; 6] = [
    "embedding",
    "vehicle encoder attention",
    "lane encoder attention",
    "decoder attention",
    "layer norm",
    "gaussian head",
];

pub fn family_of(name: &str) -> &'static str {
    if name.contains(".ln.") {
        "layer norm"
    } else if name.starts_with("embed.") {
        "embedding"
    } else if name.starts_with("encoder.vehicle") {
        "vehicle encoder attention"
    } else if name.starts_with("encoder.lane") {
        "lane encoder attention"
    } else if name.starts_with("decoder.") {
        "decoder attention"
    } else if name.starts_with("head.") {
        "gaussian head"
    } else {
        panic!("parameter `{name}` belongs to no family")
    }
}

/// Central-difference check of the eval-mode batch loss with respect to
/// `per_family` sampled coordinates of every family, plus every entry of
/// tensors smaller than `per_family`.
pub fn model_gradient_check(
    model: &Model,
    batch: &Batch,
    w: LossWeights,
    per_family: usize,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, &model.params, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = forward_batch(&mut g, &model.hyper, &pv, batch, Mode::Eval, &mut rng)?;
    let (loss, _) = batch_loss(&mut g, fwd.head, &fwd.anchor, batch, w, model.hyper.sigma_floor)?;
    g.backward(loss)?;
    let grads = gradients(&g, &pv)?;

    let offsets = model.params.offsets();
    let x = model.params.flatten();
    let mut analytic = vec![0.0; x.len()];
    for (name, start, len) in &offsets {
        analytic[*start..start + len].copy_from_slice(&grads[name]);
    }

    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for fam in FAMILIES {
        let members: Vec<&(String, usize, usize)> = offsets.iter().filter(|(n, _, _)| family_of(n) == fam).collect();
        let mut coords: Vec<usize> = Vec::new();
        let mut pool: Vec<usize> = Vec::new();
        for (_, start, len) in &members {
            if *len < per_family {
                coords.extend(*start..start + len);
            } else {
                pool.extend(*start..start + len);
            }
        }
        let take = per_family.min(pool.len());
        coords.extend(sample(&mut pick, pool.len(), take).into_iter().map(|i| pool[i]));
        let report = finite_difference_check(
            |values| {
                let m = Model { hyper: model.hyper.clone(), params: model.params.with_values(values)? };
                eval_loss(&m, batch, w)
            },
            &x,
            &analytic,
            &coords,
            step,
            tol,
        )?;
        out.push((fam, report));
    }
    Ok(out)
}

/// Whether the symmetric matrix `(s11, s12, s22)` minus `floor2·I` is
/// positive semi-definite, decided in exact rational arithmetic on the
/// stored f64 values.
pub fn exceeds_floor_exactly(s: [f64; 3], floor2: f64) -> bool {
    let q = |v: f64| BigRational::from_float(v).expect("finite entry");
    let f = q(floor2);
    let (a, b, c) = (q(s[0]) - &f, q(s[2]) - &f, q(s[1]));
    !a.is_negative() && !b.is_negative() && !(a * b - &c * &c).is_negative()
}
