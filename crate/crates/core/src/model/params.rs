use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::hyper::Hyperparams;
use crate::attention::MultiHeadConfig;
use crate::error::{Error, Result};
use crate::graph::Tensor;

/// Named parameter tensors in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// All values concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// `(name, start offset, length)` of each tensor inside [`ParamStore::flatten`].
    pub fn offsets(&self) -> Vec<(String, usize, usize)> {
        let mut at = 0;
        self.tensors
            .iter()
            .map(|(k, t)| {
                let entry = (k.clone(), at, t.len());
                at += t.len();
                entry
            })
            .collect()
    }

    /// Same names and shapes, values taken from `flat`.
    pub fn with_values(&self, flat: &[f64]) -> Result<ParamStore> {
        if flat.len() != self.num_values() {
            return Err(Error::Dimension(format!(
                "{} values for a store of {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut at = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let next = Tensor::new(t.shape().to_vec(), flat[at..at + t.len()].to_vec()).expect("shape");
                at += t.len();
                (k.clone(), next)
            })
            .collect();
        Ok(ParamStore { tensors })
    }

    /// Rounds every value through 32-bit storage.
    pub fn rounded_to_f32(&self) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let data = t.data().iter().map(|&v| v as f32 as f64).collect();
                (k.clone(), Tensor::new(t.shape().to_vec(), data).expect("shape"))
            })
            .collect();
        ParamStore { tensors }
    }
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: String, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec { name, shape: shape.to_vec(), init }
}

fn block_specs(prefix: &str, cfg: &MultiHeadConfig, out: &mut Vec<ParamSpec>) {
    for h in 0..cfg.heads {
        out.push(spec(format!("{prefix}.head{h}.wq"), &[cfg.d_q_in, cfg.d_head], Init::Xavier));
        out.push(spec(format!("{prefix}.head{h}.wk"), &[cfg.d_kv_in, cfg.d_head], Init::Xavier));
        out.push(spec(format!("{prefix}.head{h}.wv"), &[cfg.d_kv_in, cfg.d_head], Init::Xavier));
    }
    out.push(spec(format!("{prefix}.wo"), &[cfg.heads * cfg.d_head, cfg.d_out], Init::Xavier));
    out.push(spec(format!("{prefix}.ln.gain"), &[cfg.d_out], Init::Ones));
    out.push(spec(format!("{prefix}.ln.bias"), &[cfg.d_out], Init::Zeros));
}

/// Every parameter of the encoder-decoder, in initialisation order.
pub fn parameter_layout(h: &Hyperparams) -> Vec<ParamSpec> {
    let mut out = vec![
        spec("embed.vehicle.w".into(), &[h.vehicle_input_dim(), h.d_veh_embed], Init::Xavier),
        spec("embed.vehicle.b".into(), &[h.d_veh_embed], Init::Zeros),
        spec("embed.lane.w".into(), &[h.d_lane_feat, h.d_lane_embed], Init::Xavier),
        spec("embed.lane.b".into(), &[h.d_lane_embed], Init::Zeros),
    ];
    block_specs("encoder.vehicle", &h.vehicle_encoder_cfg(), &mut out);
    block_specs("encoder.lane", &h.lane_encoder_cfg(), &mut out);
    block_specs("decoder.vehicle", &h.decoder_cfg(), &mut out);
    out.push(spec("head.w".into(), &[h.d_z(), h.head_out_dim()], Init::Xavier));
    out.push(spec("head.b".into(), &[h.head_out_dim()], Init::Zeros));
    out
}

/// Seeded initialisation of every parameter in [`parameter_layout`].
pub fn init_params(h: &Hyperparams, seed: u64) -> Result<ParamStore> {
    h.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for p in parameter_layout(h) {
        let n: usize = p.shape.iter().product();
        let data = match p.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let limit = (6.0 / (p.shape[0] + p.shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            }
        };
        store.insert(p.name, Tensor::new(p.shape, data)?);
    }
    Ok(store)
}
