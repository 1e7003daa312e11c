//! Attention-matrix reports and their structured text form.

use std::fmt::Write as _;

use crate::attention::{AttentionRecord, LayerTag};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::graph::Tensor;

/// One query row of one head, peers sorted by descending weight.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub layer: LayerTag,
    pub head: usize,
    pub vehicle_id: u64,
    /// `(peer id, weight)`: vehicle ids for vehicle layers, lane indices for
    /// the lane layer.
    pub peers: Vec<(u64, f64)>,
}

/// Rows of the requested vehicles in every layer and head.
pub fn attention_report(records: &[AttentionRecord], scene: &Scene, vehicle_ids: &[u64]) -> Result<Vec<AttentionRow>> {
    let slots = vehicle_ids
        .iter()
        .map(|&id| {
            scene
                .slot_of(id)
                .filter(|&s| scene.vehicle_mask[s])
                .ok_or_else(|| Error::NotFound(format!("vehicle {id} in scene {}", scene.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for rec in records {
        for head in 0..rec.heads.len() {
            for (&id, &slot) in vehicle_ids.iter().zip(&slots) {
                let row = rec.row(head, slot);
                let mut peers: Vec<(u64, f64)> = row
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| (if rec.layer.keys_are_lanes() { k as u64 } else { scene.vehicle_ids[k] }, w))
                    .collect();
                peers.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                out.push(AttentionRow { layer: rec.layer, head, vehicle_id: id, peers });
            }
        }
    }
    Ok(out)
}

/// Text dump: a full matrix block per layer and head, then the sorted rows
/// of the requested vehicles. Weights are written with round-trip precision.
pub fn render_attention_dump(records: &[AttentionRecord], scene: &Scene, vehicle_ids: &[u64]) -> Result<String> {
    let rows = attention_report(records, scene, vehicle_ids)?;
    let mut s = String::new();
    writeln!(s, "scene = {}", scene.id).unwrap();
    writeln!(s, "ego = {}", scene.ego_id()).unwrap();
    let ids = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    for rec in records {
        let keys: Vec<u64> = if rec.layer.keys_are_lanes() {
            (0..rec.n_keys() as u64).collect()
        } else {
            scene.vehicle_ids.clone()
        };
        for (h, m) in rec.heads.iter().enumerate() {
            writeln!(s, "\n[matrix {} head {h}]", rec.layer).unwrap();
            writeln!(s, "queries = {}", ids(&scene.vehicle_ids)).unwrap();
            writeln!(s, "keys = {}", ids(&keys)).unwrap();
            for q in 0..rec.n_queries() {
                let row = &m.data()[q * rec.n_keys()..(q + 1) * rec.n_keys()];
                writeln!(s, "{}", row.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>().join(" ")).unwrap();
            }
        }
    }
    for r in rows {
        writeln!(s, "\n[row {} head {} vehicle {}]", r.layer, r.head, r.vehicle_id).unwrap();
        for (peer, w) in r.peers {
            writeln!(s, "{peer} {w:?}").unwrap();
        }
    }
    Ok(s)
}

/// Reads the matrix blocks of a dump back as attention records.
pub fn parse_attention_matrices(text: &str) -> Result<Vec<AttentionRecord>> {
    let bad = |m: String| Error::Parse { file: "attention dump".into(), row: 0, msg: m };
    let mut out: Vec<AttentionRecord> = Vec::new();
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.next() {
        let Some(spec) = line.strip_prefix("[matrix ").and_then(|l| l.strip_suffix(']')) else {
            continue;
        };
        let parts: Vec<&str> = spec.split_whitespace().collect();
        if parts.len() != 3 || parts[1] != "head" {
            return Err(bad(format!("malformed block header `{line}`")));
        }
        let layer: LayerTag = parts[0].parse()?;
        let head: usize = parts[2].parse().map_err(|_| bad(format!("bad head in `{line}`")))?;
        let count = |l: Option<&str>, key: &str| -> Result<usize> {
            let l = l.ok_or_else(|| bad("truncated block".into()))?;
            let rest = l.strip_prefix(key).ok_or_else(|| bad(format!("expected `{key}`, got `{l}`")))?;
            Ok(rest.split_whitespace().count())
        };
        let n_q = count(lines.next(), "queries =")?;
        let n_k = count(lines.next(), "keys =")?;
        let mut data = Vec::with_capacity(n_q * n_k);
        for _ in 0..n_q {
            let row = lines.next().ok_or_else(|| bad("truncated matrix".into()))?;
            for w in row.split_whitespace() {
                data.push(w.parse::<f64>().map_err(|_| bad(format!("bad weight `{w}`")))?);
            }
        }
        let t = Tensor::new(vec![n_q, n_k], data).map_err(|e| bad(e.to_string()))?;
        match out.last_mut() {
            Some(r) if r.layer == layer && r.heads.len() == head => r.heads.push(t),
            _ if head == 0 => out.push(AttentionRecord { layer, heads: vec![t] }),
            _ => return Err(bad(format!("head {head} of {layer} out of order"))),
        }
    }
    Ok(out)
}
