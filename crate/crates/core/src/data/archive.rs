//! Versioned binary scene archive.
//!
//! ```text
//! "ATRS" u32 version
//! str header (key = value: scene count and provenance hash)
//! str provenance
//! u32 scene count, then per scene:
//!   u64 id, u32 ego_index, f64 dt, u32 t_obs, u32 t_pred, u32 N, u32 M,
//!   N × u64 vehicle id, N × u8 mask, M × u8 lane mask,
//!   f64 past, props, future, lanes
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::scene::{Scene, LANE_FEATURES, VEHICLE_PROPS};
use crate::error::{Error, Result};
use crate::kv;
use crate::training::{put_str, Reader};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"ATRS";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneArchive {
    pub scenes: Vec<Scene>,
    /// Free text describing how the scenes were produced.
    pub provenance: String,
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl SceneArchive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        let mut header = BTreeMap::new();
        header.insert("scenes".to_string(), self.scenes.len().to_string());
        put_str(&mut out, &kv::render(&header));
        put_str(&mut out, &self.provenance);
        out.extend_from_slice(&(self.scenes.len() as u32).to_le_bytes());
        for s in &self.scenes {
            out.extend_from_slice(&s.id.to_le_bytes());
            out.extend_from_slice(&(s.ego_index as u32).to_le_bytes());
            out.extend_from_slice(&s.dt.to_le_bytes());
            for v in [s.t_obs, s.t_pred, s.n_slots(), s.n_lanes()] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for id in &s.vehicle_ids {
                out.extend_from_slice(&id.to_le_bytes());
            }
            out.extend(s.vehicle_mask.iter().map(|&m| m as u8));
            out.extend(s.lane_mask.iter().map(|&m| m as u8));
            put_f64s(&mut out, &s.past);
            put_f64s(&mut out, &s.props);
            put_f64s(&mut out, &s.future);
            put_f64s(&mut out, &s.lanes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "scene archive");
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::Corrupt("not a scene archive (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: ARCHIVE_VERSION });
        }
        let mut header = kv::parse(&r.string()?)?;
        let declared: usize = kv::take(&mut header, "scenes")?;
        kv::reject_leftovers(&header, "archive header")?;
        let provenance = r.string()?;
        let count = r.u32()? as usize;
        if count != declared {
            return Err(Error::Corrupt(format!("header declares {declared} scenes, body holds {count}")));
        }
        let mut scenes = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = r.u64()?;
            let ego_index = r.u32()? as usize;
            let dt = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let t_obs = r.u32()? as usize;
            let t_pred = r.u32()? as usize;
            let n = r.u32()? as usize;
            let m = r.u32()? as usize;
            let vehicle_ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let flags = |r: &mut Reader<'_>, k: usize| -> Result<Vec<bool>> { Ok(r.take(k)?.iter().map(|&b| b != 0).collect()) };
            let vehicle_mask = flags(&mut r, n)?;
            let lane_mask = flags(&mut r, m)?;
            let mut f64s = |k: usize| -> Result<Vec<f64>> {
                let raw = r.take(k.checked_mul(8).ok_or_else(|| Error::Corrupt("scene size overflows".into()))?)?;
                Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
            };
            let past = f64s(n * t_obs * 2)?;
            let props = f64s(n * VEHICLE_PROPS)?;
            let future = f64s(n * t_pred * 2)?;
            let lanes = f64s(m * LANE_FEATURES)?;
            let scene =
                Scene { id, ego_index, dt, t_obs, t_pred, vehicle_ids, past, props, future, vehicle_mask, lanes, lane_mask };
            scene.validate().map_err(|e| Error::Corrupt(format!("archived scene {id} is invalid: {e}")))?;
            scenes.push(scene);
        }
        r.finish()?;
        Ok(Self { scenes, provenance })
    }
}

pub fn save_archive(archive: &SceneArchive, path: &Path) -> Result<()> {
    std::fs::write(path, archive.to_bytes())?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<SceneArchive> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("scene archive {}", path.display())),
        _ => Error::Io(e),
    })?;
    SceneArchive::from_bytes(&bytes)
}
