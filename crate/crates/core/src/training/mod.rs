//! Losses, the Adam optimizer, the training loop and checkpoints.

mod adam;
mod checkpoint;
mod loss;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, global_norm, AdamConfig, AdamState, DEFAULT_CLIP_NORM};
pub(crate) use checkpoint::{put_str, Reader};
pub use checkpoint::{
    history_from_csv, history_to_csv, load_checkpoint, save_checkpoint, Checkpoint, EpochRecord, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION, HISTORY_HEADER,
};
pub use loss::{batch_loss, nll_loss, recon_loss, total_loss, LossParts, LossWeights};

use crate::data::{batches, Batch, Scene};
use crate::error::{Error, Result};
use crate::evaluation::{horizon_indices, rmse_of_forecasts};
use crate::graph::{Graph, Mode};
use crate::model::{forward_batch, Hyperparams, Model, ParamVars};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Whether the ego contributes to losses and metrics.
    pub predict_ego: bool,
    /// Fraction of scenes, chosen by id hash, held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            seed: 0,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            predict_ego: true,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Parameter(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        self.weights.validate()?;
        self.adam.validate()
    }
}

/// SplitMix64 finaliser; a fixed, platform-independent 64-bit mix.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Whether a scene id falls in the validation share.
pub fn is_validation(scene_id: u64, fraction: f64) -> bool {
    let unit = (mix64(scene_id) >> 11) as f64 / (1u64 << 53) as f64;
    unit < fraction
}

/// `(training, validation)` partition by scene-id hash.
pub fn split_by_id(scenes: &[Scene], fraction: f64) -> (Vec<Scene>, Vec<Scene>) {
    scenes.iter().cloned().partition(|s| !is_validation(s.id, fraction))
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

/// Model, optimizer state and history of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    /// Epochs completed so far.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(hyper: Hyperparams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(hyper, config.seed)?;
        let adam = AdamState::new(config.adam, &model.params);
        Ok(Self { model, adam, epoch: 0, history: Vec::new(), config })
    }

    /// Continues from a checkpoint; epoch numbering carries on.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ckpt.model();
        let mut adam = ckpt.adam.clone().unwrap_or_else(|| AdamState::new(config.adam, &model.params));
        adam.config = config.adam;
        Ok(Self { model, adam, epoch: ckpt.epoch, history: ckpt.history.clone(), config })
    }

    /// Forward, backward and one Adam update on `batch`. Returns the loss
    /// before the update.
    pub fn step(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<LossParts> {
        let h = &self.model.hyper;
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &self.model.params, true);
        let fwd = forward_batch(&mut g, h, &pv, batch, Mode::Train, rng)?;
        let (loss, parts) = batch_loss(&mut g, fwd.head, &fwd.anchor, batch, self.config.weights, h.sigma_floor)?;
        g.backward(loss)?;
        let grads = gradients(&g, &pv)?;
        adam_step(&mut self.model.params, &grads, &mut self.adam)?;
        Ok(parts)
    }

    /// One pass over `train`, then validation RMSE at 3 s on `val`.
    pub fn run_epoch(&mut self, train: &[Scene], val: &[Scene]) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let shuffle = mix64(self.config.seed ^ mix64(SHUFFLE_STREAM.wrapping_add(epoch as u64)));
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.config.seed ^ mix64(DROPOUT_STREAM.wrapping_add(epoch as u64))));
        let mut total = 0.0;
        let mut count = 0usize;
        for (bi, batch) in batches(train, self.config.batch_size, Some(shuffle), self.config.predict_ego)?.enumerate() {
            let batch = batch?;
            let diverged = |detail: String| Error::Divergence { epoch, batch: bi, detail };
            match self.step(&batch, &mut rng) {
                Ok(parts) if parts.total.is_finite() => {
                    total += parts.total;
                    count += 1;
                }
                Ok(parts) => return Err(diverged(format!("loss is {}", parts.total))),
                Err(Error::NonFinite(op)) => return Err(diverged(format!("non-finite value in {op}"))),
                Err(e) => return Err(e),
            }
            if self.model.params.iter().any(|(_, t)| !t.all_finite()) {
                return Err(diverged("parameters became non-finite".into()));
            }
        }
        let (long, lat) = self.validation_rmse_3s(val)?;
        let record = EpochRecord { epoch, train_loss: total / count as f64, val_rmse_long_3s: long, val_rmse_lat_3s: lat };
        self.epoch = epoch;
        self.history.push(record.clone());
        Ok(record)
    }

    /// `(longitudinal, lateral)` RMSE at 3 s; NaN when there is nothing to
    /// score or 3 s lies beyond the prediction window.
    pub fn validation_rmse_3s(&self, val: &[Scene]) -> Result<(f64, f64)> {
        let Some(first) = val.first() else {
            return Ok((f64::NAN, f64::NAN));
        };
        if horizon_indices(first.dt, first.t_pred, &[3.0]).is_err() {
            return Ok((f64::NAN, f64::NAN));
        }
        let forecasts = self.model.predict(val)?;
        let report = rmse_of_forecasts(&forecasts, val, self.config.predict_ego, &[3.0])?;
        let row = &report.rows[0];
        if row.count == 0 {
            return Ok((f64::NAN, f64::NAN));
        }
        Ok((row.longitudinal, row.lateral))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.model, Some(&self.adam), self.epoch, self.config.seed, self.history.clone())
    }
}

/// Gradients of every bound parameter after `backward`.
pub fn gradients(g: &Graph, pv: &ParamVars) -> Result<BTreeMap<String, Vec<f64>>> {
    pv.iter()
        .map(|(k, &v)| {
            let grad = g.grad(v).ok_or_else(|| Error::Contract(format!("parameter `{k}` has no gradient")))?;
            Ok((k.clone(), grad.to_vec()))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Seeded training from scratch: splits off validation scenes by id hash,
/// runs `config.epochs` epochs and returns the final checkpoint.
pub fn train(dataset: &[Scene], hyper: Hyperparams, config: TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Parameter("training dataset is empty".into()));
    }
    let (train_set, val_set) = split_by_id(dataset, config.val_fraction);
    if train_set.is_empty() {
        return Err(Error::Parameter("every scene fell into the validation split".into()));
    }
    let epochs = config.epochs;
    let mut trainer = Trainer::new(hyper, config)?;
    for _ in 0..epochs {
        trainer.run_epoch(&train_set, &val_set)?;
    }
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), history: trainer.history })
}
