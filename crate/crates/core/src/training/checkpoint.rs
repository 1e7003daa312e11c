//! Binary checkpoint format.
//!
//! ```text
//! "ATRJ" u32 version
//! str hyperparameters   (canonical key = value block)
//! str metadata          (key = value block)
//! str loss history      (CSV)
//! str provenance        (run configuration text)
//! u32 tensor count, then per tensor: str name, u32 rank, u32 extents.., u64 offset
//! u64 value count, then f32 payload
//! ```
//! Integers are little-endian; `str` is a u32 byte length followed by UTF-8.
//! Adam moments are stored as tensors named `adam.m.<name>` / `adam.v.<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use super::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::kv;
use crate::model::{Hyperparams, Model, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATRJ";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse_long_3s: f64,
    pub val_rmse_lat_3s: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_rmse_long_3s,val_rmse_lat_3s";

pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        out.push_str(&format!("{},{:?},{:?},{:?}\n", r.epoch, r.train_loss, r.val_rmse_long_3s, r.val_rmse_lat_3s));
    }
    out
}

pub fn history_from_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::Corrupt("loss history lacks its header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Corrupt(format!("bad history value `{s}`")));
            if f.len() != 4 {
                return Err(Error::Corrupt(format!("bad history row `{line}`")));
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| Error::Corrupt(format!("bad epoch `{}`", f[0])))?,
                train_loss: num(f[1])?,
                val_rmse_long_3s: num(f[2])?,
                val_rmse_lat_3s: num(f[3])?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub hyper: Hyperparams,
    /// Values are always representable in 32 bits.
    pub params: ParamStore,
    pub adam: Option<AdamState>,
    /// Epochs completed.
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub provenance: String,
}

impl Checkpoint {
    /// Builds a checkpoint, rounding parameters and moments to 32 bits so
    /// that the in-memory value equals what [`load_checkpoint`] returns.
    pub fn new(model: &Model, adam: Option<&AdamState>, epoch: usize, seed: u64, history: Vec<EpochRecord>) -> Self {
        Self {
            hyper: model.hyper.clone(),
            params: model.params.rounded_to_f32(),
            adam: adam.map(AdamState::rounded_to_f32),
            epoch,
            seed,
            history,
            provenance: String::new(),
        }
    }

    pub fn model(&self) -> Model {
        Model { hyper: self.hyper.clone(), params: self.params.clone() }
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("epoch".into(), self.epoch.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("adam".into(), self.adam.is_some().to_string());
        if let Some(a) = &self.adam {
            let c = &a.config;
            m.insert("adam_step".into(), a.step.to_string());
            m.insert("adam_lr".into(), kv::fmt_f64(c.lr));
            m.insert("adam_beta1".into(), kv::fmt_f64(c.beta1));
            m.insert("adam_beta2".into(), kv::fmt_f64(c.beta2));
            m.insert("adam_eps".into(), kv::fmt_f64(c.eps));
            m.insert("adam_clip_norm".into(), c.clip_norm.map_or("none".into(), kv::fmt_f64));
        }
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Tensor)> = self.params.iter().map(|(k, t)| (k.clone(), t)).collect();
        let moment = |prefix: &str, map: &BTreeMap<String, Vec<f64>>| -> Vec<(String, Tensor)> {
            map.iter()
                .map(|(k, v)| {
                    let shape = self.params.get(k).map(|t| t.shape().to_vec()).unwrap_or_else(|_| vec![v.len()]);
                    (format!("{prefix}{k}"), Tensor::new(shape, v.clone()).expect("moment shape"))
                })
                .collect()
        };
        let extra: Vec<(String, Tensor)> = match &self.adam {
            Some(a) => moment("adam.m.", &a.m).into_iter().chain(moment("adam.v.", &a.v)).collect(),
            None => Vec::new(),
        };
        tensors.extend(extra.iter().map(|(k, t)| (k.clone(), t)));

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.hyper.to_text());
        put_str(&mut out, &kv::render(&self.metadata()));
        put_str(&mut out, &history_to_csv(&self.history));
        put_str(&mut out, &self.provenance);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: CHECKPOINT_VERSION });
        }
        let hyper = Hyperparams::from_text(&r.string()?)?;
        let mut meta = kv::parse(&r.string()?)?;
        let history = history_from_csv(&r.string()?)?;
        let provenance = r.string()?;
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            dir.push((name, shape, offset));
        }
        let total = r.u64()? as usize;
        let payload = r.take(total.checked_mul(4).ok_or_else(|| Error::Corrupt("payload size overflows".into()))?)?;
        r.finish()?;
        let values: Vec<f64> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();

        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, shape, offset) in dir {
            let len: usize = shape.iter().product();
            let end = offset.checked_add(len).filter(|&e| e <= values.len());
            let end = end.ok_or_else(|| Error::Corrupt(format!("tensor `{name}` lies outside the payload")))?;
            let data = values[offset..end].to_vec();
            if let Some(k) = name.strip_prefix("adam.m.") {
                m.insert(k.to_string(), data);
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                v.insert(k.to_string(), data);
            } else {
                let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("tensor `{name}`: {e}")))?;
                params.insert(name, t);
            }
        }
        let expected = crate::model::parameter_layout(&hyper);
        for spec in &expected {
            let t = params.get(&spec.name).map_err(|_| Error::Corrupt(format!("parameter `{}` missing", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Corrupt(format!("parameter `{}` has shape {:?}", spec.name, t.shape())));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Corrupt("checkpoint holds parameters the model does not use".into()));
        }

        let epoch = kv::take(&mut meta, "epoch")?;
        let seed = kv::take(&mut meta, "seed")?;
        let has_adam: String = kv::take(&mut meta, "adam")?;
        let adam = if kv::parse_bool("adam", &has_adam)? {
            let clip: String = kv::take(&mut meta, "adam_clip_norm")?;
            let config = AdamConfig {
                lr: kv::take(&mut meta, "adam_lr")?,
                beta1: kv::take(&mut meta, "adam_beta1")?,
                beta2: kv::take(&mut meta, "adam_beta2")?,
                eps: kv::take(&mut meta, "adam_eps")?,
                clip_norm: if clip == "none" { None } else { Some(kv::parse_value("adam_clip_norm", &clip)?) },
            };
            let step = kv::take(&mut meta, "adam_step")?;
            if m.len() != params.len() || v.len() != params.len() {
                return Err(Error::Corrupt("optimizer moments do not cover every parameter".into()));
            }
            Some(AdamState { config, step, m, v })
        } else {
            None
        };
        kv::reject_leftovers(&meta, "checkpoint metadata")?;
        Ok(Self { hyper, params, adam, epoch, seed, history, provenance })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("checkpoint {}", path.display())),
        _ => Error::Io(e),
    })?;
    Checkpoint::from_bytes(&bytes)
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Bounds-checked little-endian reader; running short is a corrupt-file error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, at: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("{} truncated at byte {}", self.what, self.bytes.len())))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Corrupt(format!("{} holds invalid UTF-8", self.what)))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Corrupt(format!("{} has {} trailing bytes", self.what, self.bytes.len() - self.at)));
        }
        Ok(())
    }
}
