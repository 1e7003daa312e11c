//! Scaled dot-product attention, multi-head attention and the residual
//! attention block (multi-head → dropout → residual add → layer norm).
//!
//! All functions accept either unbatched `[n, d]` operands or batched
//! `[batch, n, d]` operands. Key masks hold one flag per (batch, key) pair,
//! `true` marking a real key.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadConfig {
    pub heads: usize,
    pub d_q_in: usize,
    pub d_kv_in: usize,
    /// Per-head projected extent; keys and values share it.
    pub d_head: usize,
    pub d_out: usize,
}

impl MultiHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_head == 0 || self.d_q_in == 0 || self.d_kv_in == 0 {
            return Err(Error::Parameter(format!("attention extents must be positive: {self:?}")));
        }
        if self.d_out != self.d_q_in {
            return Err(Error::Parameter(format!(
                "residual connection needs d_out == d_q_in, got {} and {}",
                self.d_out, self.d_q_in
            )));
        }
        Ok(())
    }
}

/// Graph handles for the projections of one multi-head layer.
#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attn: MultiHeadParams,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ScaledDotOutput {
    pub output: Var,
    /// Row-stochastic attention matrix, `[.., n_q, n_k]`.
    pub weights: Var,
    /// `QKᵀ/√d_k` before masking.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// One attention matrix per head.
    pub weights: Vec<Var>,
}

/// `softmax(QKᵀ/√d_k + mask) · V`
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, key_valid: &[bool]) -> Result<ScaledDotOutput> {
    let d_k = g.value(k).last_dim();
    if g.value(q).last_dim() != d_k {
        return Err(Error::Dimension(format!(
            "query extent {:?} and key extent {:?} differ",
            g.value(q).shape(),
            g.value(k).shape()
        )));
    }
    let kt = g.transpose(k)?;
    let dots = g.matmul(q, kt)?;
    let logits = g.scale(dots, 1.0 / (d_k as f64).sqrt())?;
    let masked = g.mask_keys(logits, key_valid)?;
    let last = g.value(masked).rank() - 1;
    let weights = g.softmax(masked, last)?;
    let output = g.matmul(weights, v)?;
    Ok(ScaledDotOutput { output, weights, logits })
}

/// Heads run independently, are concatenated on the feature axis and
/// projected by `W^O`.
pub fn multi_head(
    g: &mut Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    key_valid: &[bool],
    cfg: &MultiHeadConfig,
    params: &MultiHeadParams,
) -> Result<AttentionOutput> {
    check_params(g, q_in, k_in, v_in, cfg, params)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let q = g.matmul(q_in, params.wq[i])?;
        let k = g.matmul(k_in, params.wk[i])?;
        let v = g.matmul(v_in, params.wv[i])?;
        let head = scaled_dot_attention(g, q, k, v, key_valid)?;
        heads.push(head.output);
        weights.push(head.weights);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        let axis = g.value(heads[0]).rank() - 1;
        g.concat(&heads, axis)?
    };
    let output = g.matmul(joined, params.wo)?;
    Ok(AttentionOutput { output, weights })
}

/// `layer_norm(Q_in + dropout(multi_head(..)))`. Attention weights are
/// captured before dropout.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<R: Rng + ?Sized>(
    g: &mut Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    key_valid: &[bool],
    cfg: &MultiHeadConfig,
    params: &BlockParams,
    p_drop: f64,
    ln_epsilon: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<AttentionOutput> {
    cfg.validate()?;
    let mh = multi_head(g, q_in, k_in, v_in, key_valid, cfg, &params.attn)?;
    let dropped = g.dropout(mh.output, p_drop, mode, rng)?;
    let residual = g.add(q_in, dropped)?;
    let output = g.layer_norm(residual, params.ln_gain, params.ln_bias, ln_epsilon)?;
    Ok(AttentionOutput { output, weights: mh.weights })
}

fn check_params(
    g: &Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    cfg: &MultiHeadConfig,
    p: &MultiHeadParams,
) -> Result<()> {
    let bad = |what: String| Err(Error::Dimension(what));
    if p.wq.len() != cfg.heads || p.wk.len() != cfg.heads || p.wv.len() != cfg.heads {
        return bad(format!(
            "{} heads configured but {}/{}/{} projection sets supplied",
            cfg.heads,
            p.wq.len(),
            p.wk.len(),
            p.wv.len()
        ));
    }
    let expect = |v: Var, shape: [usize; 2], name: &str| -> Result<()> {
        if g.value(v).shape() != shape {
            return Err(Error::Dimension(format!(
                "{name} has shape {:?}, config requires {shape:?}",
                g.value(v).shape()
            )));
        }
        Ok(())
    };
    for i in 0..cfg.heads {
        expect(p.wq[i], [cfg.d_q_in, cfg.d_head], "W^Q")?;
        expect(p.wk[i], [cfg.d_kv_in, cfg.d_head], "W^K")?;
        expect(p.wv[i], [cfg.d_kv_in, cfg.d_head], "W^V")?;
    }
    expect(p.wo, [cfg.heads * cfg.d_head, cfg.d_out], "W^O")?;
    if g.value(q_in).last_dim() != cfg.d_q_in
        || g.value(k_in).last_dim() != cfg.d_kv_in
        || g.value(v_in).last_dim() != cfg.d_kv_in
    {
        return bad(format!(
            "inputs {:?}/{:?}/{:?} disagree with config {cfg:?}",
            g.value(q_in).shape(),
            g.value(k_in).shape(),
            g.value(v_in).shape()
        ));
    }
    Ok(())
}

/// Which attention layer a record was captured from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerTag {
    VehicleEncoder,
    LaneEncoder,
    VehicleDecoder,
}

impl LayerTag {
    pub const ALL: [LayerTag; 3] = [LayerTag::VehicleEncoder, LayerTag::LaneEncoder, LayerTag::VehicleDecoder];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::VehicleEncoder => "vehicle-encoder",
            LayerTag::LaneEncoder => "lane-encoder",
            LayerTag::VehicleDecoder => "vehicle-decoder",
        }
    }

    /// Whether the keys of this layer are lanes rather than vehicles.
    pub fn keys_are_lanes(self) -> bool {
        self == LayerTag::LaneEncoder
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown attention layer `{s}`")))
    }
}

/// Attention matrices of one layer for one scene, one `[n_q, n_k]` matrix per head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: LayerTag,
    pub heads: Vec<Tensor>,
}

impl AttentionRecord {
    pub fn n_queries(&self) -> usize {
        self.heads.first().map_or(0, |h| h.shape()[0])
    }

    pub fn n_keys(&self) -> usize {
        self.heads.first().map_or(0, |h| h.shape()[1])
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let k = self.n_keys();
        &self.heads[head].data()[query * k..(query + 1) * k]
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for h in 0..self.heads.len() {
            for q in 0..self.n_queries() {
                worst = worst.max((self.row(h, q).iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn bind_mh(g: &mut Graph, cfg: &MultiHeadConfig, rng: &mut ChaCha8Rng) -> MultiHeadParams {
        let mut mk = |g: &mut Graph, s: [usize; 2]| g.param(random(rng, &s));
        let wq = (0..cfg.heads).map(|_| mk(g, [cfg.d_q_in, cfg.d_head])).collect();
        let wk = (0..cfg.heads).map(|_| mk(g, [cfg.d_kv_in, cfg.d_head])).collect();
        let wv = (0..cfg.heads).map(|_| mk(g, [cfg.d_kv_in, cfg.d_head])).collect();
        let wo = mk(g, [cfg.heads * cfg.d_head, cfg.d_out]);
        MultiHeadParams { wq, wk, wv, wo }
    }

    #[test]
    fn single_key_attends_fully() {
        let mut g = Graph::new();
        let q = g.input(Tensor::matrix(&[&[0.3, -1.0], &[2.0, 0.5]]));
        let k = g.input(Tensor::matrix(&[&[1.0, 1.0]]));
        let v = g.input(Tensor::matrix(&[&[4.0, 5.0, 6.0]]));
        let out = scaled_dot_attention(&mut g, q, k, v, &[true]).unwrap();
        assert_eq!(g.value(out.weights).data(), &[1.0, 1.0]);
        assert_eq!(g.value(out.output).data(), &[4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let mut g = Graph::new();
        let q = g.input(Tensor::matrix(&[&[0.7, 0.1]]));
        let k = g.input(Tensor::matrix(&[&[1.0, -2.0], &[1.0, -2.0]]));
        let v = g.input(Tensor::matrix(&[&[1.0], &[3.0]]));
        let out = scaled_dot_attention(&mut g, q, k, v, &[true, true]).unwrap();
        assert_eq!(g.value(out.weights).data(), &[0.5, 0.5]);
        assert_eq!(g.value(out.output).data(), &[2.0]);
    }

    #[test]
    fn saturated_orthonormal_queries_select_matching_values() {
        // Q = K = 100·I₃ (rows orthonormal, scaled) → weights ≈ I, output ≈ V.
        let big = |i: usize| -> Vec<f64> { (0..3).map(|j| if i == j { 100.0 } else { 0.0 }).collect() };
        let rows: Vec<Vec<f64>> = (0..3).map(big).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let mut g = Graph::new();
        let q = g.input(Tensor::matrix(&refs));
        // permuted keys: key j carries query (j+1)%3's direction
        let perm = [1usize, 2, 0];
        let prow: Vec<&[f64]> = perm.iter().map(|&p| rows[p].as_slice()).collect();
        let k = g.input(Tensor::matrix(&prow));
        let v = g.input(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0], &[5.0, 5.0]]));
        let out = scaled_dot_attention(&mut g, q, k, v, &[true; 3]).unwrap();
        // Direct evaluation: logits 10⁴/√3 on the match, 0 elsewhere.
        let w = g.value(out.weights).data();
        for qi in 0..3 {
            let matching = perm.iter().position(|&p| p == qi).unwrap();
            for kj in 0..3 {
                let expect = if kj == matching { 1.0 } else { 0.0 };
                assert!((w[qi * 3 + kj] - expect).abs() < 1e-3);
            }
        }
        let o = g.value(out.output).data();
        let vrows = [[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]];
        for qi in 0..3 {
            let matching = perm.iter().position(|&p| p == qi).unwrap();
            for d in 0..2 {
                assert!((o[qi * 2 + d] - vrows[matching][d]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn all_keys_masked_is_degenerate() {
        let mut g = Graph::new();
        let q = g.input(Tensor::matrix(&[&[1.0]]));
        let k = g.input(Tensor::matrix(&[&[1.0], &[2.0]]));
        let v = g.input(Tensor::matrix(&[&[1.0], &[2.0]]));
        let err = scaled_dot_attention(&mut g, q, k, v, &[false, false]).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { .. }));
    }

    #[test]
    fn logits_are_scaled_by_inverse_root_dk() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d_k in [1usize, 4] {
            let mut g = Graph::new();
            let qt = random(&mut rng, &[3, d_k]);
            let kt = random(&mut rng, &[2, d_k]);
            let q = g.input(qt.clone());
            let k = g.input(kt.clone());
            let v = g.input(Tensor::zeros(&[2, 1]));
            let out = scaled_dot_attention(&mut g, q, k, v, &[true, true]).unwrap();
            let logits = g.value(out.logits).data();
            for i in 0..3 {
                for j in 0..2 {
                    let dot: f64 = (0..d_k).map(|c| qt.data()[i * d_k + c] * kt.data()[j * d_k + c]).sum();
                    let expect = if d_k == 1 { dot } else { dot * 0.5 };
                    assert_eq!(logits[i * 2 + j], expect);
                }
            }
        }
    }

    #[test]
    fn one_identity_head_reduces_to_scaled_dot_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[4, 3]);
        let mask = [true, true, false, true];
        let mut g = Graph::new();
        let xi = g.input(x);
        let id = g.input(Tensor::identity(3));
        let cfg = MultiHeadConfig { heads: 1, d_q_in: 3, d_kv_in: 3, d_head: 3, d_out: 3 };
        let p = MultiHeadParams { wq: vec![id], wk: vec![id], wv: vec![id], wo: id };
        let mh = multi_head(&mut g, xi, xi, xi, &mask, &cfg, &p).unwrap();
        let sd = scaled_dot_attention(&mut g, xi, xi, xi, &mask).unwrap();
        assert_eq!(g.value(mh.output).data(), g.value(sd.output).data());
        assert_eq!(g.value(mh.weights[0]).data(), g.value(sd.weights).data());
    }

    #[test]
    fn zeroed_second_head_values_leave_first_head_through_its_wo_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = MultiHeadConfig { heads: 2, d_q_in: 3, d_kv_in: 3, d_head: 2, d_out: 3 };
        let x = random(&mut rng, &[3, 3]);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let mut p = bind_mh(&mut g, &cfg, &mut rng);
        p.wv[1] = g.input(Tensor::zeros(&[3, 2]));
        let mh = multi_head(&mut g, xi, xi, xi, &[true; 3], &cfg, &p).unwrap();

        // hand computation: head 1 output times the first d_head rows of W^O
        let q = g.matmul(xi, p.wq[0]).unwrap();
        let k = g.matmul(xi, p.wk[0]).unwrap();
        let v = g.matmul(xi, p.wv[0]).unwrap();
        let h1 = scaled_dot_attention(&mut g, q, k, v, &[true; 3]).unwrap();
        let wo = g.value(p.wo).data().to_vec();
        let top = g.input(Tensor::new(vec![2, 3], wo[..6].to_vec()).unwrap());
        let expect = g.matmul(h1.output, top).unwrap();
        let (a, b) = (g.value(mh.output).data(), g.value(expect).data());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn key_permutation_leaves_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = MultiHeadConfig { heads: 2, d_q_in: 4, d_kv_in: 3, d_head: 2, d_out: 4 };
        let q = random(&mut rng, &[2, 4]);
        let kv = random(&mut rng, &[5, 3]);
        let mask = [true, false, true, true, true];
        let perm = [3usize, 0, 4, 1, 2];
        let kv_p = Tensor::new(vec![5, 3], perm.iter().flat_map(|&i| kv.data()[i * 3..i * 3 + 3].to_vec()).collect()).unwrap();
        let mask_p: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();

        let mut g = Graph::new();
        let p = bind_mh(&mut g, &cfg, &mut rng);
        let qi = g.input(q);
        let k1 = g.input(kv);
        let k2 = g.input(kv_p);
        let a = multi_head(&mut g, qi, k1, k1, &mask, &cfg, &p).unwrap();
        let b = multi_head(&mut g, qi, k2, k2, &mask_p, &cfg, &p).unwrap();
        for (x, y) in g.value(a.output).data().iter().zip(g.value(b.output).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for h in 0..2 {
            let (wa, wb) = (g.value(a.weights[h]).data(), g.value(b.weights[h]).data());
            for qi in 0..2 {
                for (j, &src) in perm.iter().enumerate() {
                    assert!((wb[qi * 5 + j] - wa[qi * 5 + src]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn block_with_zero_sublayer_is_layer_norm_of_query() {
        let cfg = MultiHeadConfig { heads: 2, d_q_in: 3, d_kv_in: 3, d_head: 2, d_out: 3 };
        let mut g = Graph::new();
        let z = |g: &mut Graph, s: &[usize]| g.input(Tensor::zeros(s));
        let attn = MultiHeadParams {
            wq: vec![z(&mut g, &[3, 2]), z(&mut g, &[3, 2])],
            wk: vec![z(&mut g, &[3, 2]), z(&mut g, &[3, 2])],
            wv: vec![z(&mut g, &[3, 2]), z(&mut g, &[3, 2])],
            wo: z(&mut g, &[4, 3]),
        };
        let params = BlockParams { attn, ln_gain: g.input(Tensor::filled(&[3], 1.0)), ln_bias: z(&mut g, &[3]) };
        let x = g.input(Tensor::matrix(&[&[1.0, 2.0, 4.0], &[-1.0, 0.0, 0.5]]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = attention_block(&mut g, x, x, x, &[true, true], &cfg, &params, 0.7, 1e-6, Mode::Eval, &mut rng).unwrap();
        let ln = g.layer_norm(x, params.ln_gain, params.ln_bias, 1e-6).unwrap();
        assert_eq!(g.value(out.output).data(), g.value(ln).data());
    }

    #[test]
    fn block_train_and_eval_agree_without_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = MultiHeadConfig { heads: 2, d_q_in: 3, d_kv_in: 3, d_head: 2, d_out: 3 };
        let x = random(&mut rng, &[4, 3]);
        let mut g = Graph::new();
        let attn = bind_mh(&mut g, &cfg, &mut rng);
        let params = BlockParams { attn, ln_gain: g.param(Tensor::filled(&[3], 1.0)), ln_bias: g.param(Tensor::zeros(&[3])) };
        let xi = g.input(x);
        let a = attention_block(&mut g, xi, xi, xi, &[true; 4], &cfg, &params, 0.0, 1e-6, Mode::Train, &mut rng).unwrap();
        let b = attention_block(&mut g, xi, xi, xi, &[true; 4], &cfg, &params, 0.0, 1e-6, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(a.output).data(), g.value(b.output).data());
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let cfg = MultiHeadConfig { heads: 2, d_q_in: 4, d_kv_in: 3, d_head: 3, d_out: 4 };
        let q = random(&mut rng, &[2, 3, 4]);
        let kv = random(&mut rng, &[2, 5, 3]);
        let weights: Vec<Tensor> = (0..6)
            .map(|i| random(&mut rng, if i % 3 == 0 { &[4, 3] } else { &[3, 3] }))
            .collect();
        let wo = random(&mut rng, &[6, 4]);
        let probe = random(&mut rng, &[2, 3, 4]);
        let mask = [true, true, false, true, true, true, true, true, false, true];
        let build = |g: &mut Graph, qv: Var| -> Result<Var> {
            let mut next = weights.iter().map(|w| g.input(w.clone()));
            let mut take = || next.next().unwrap();
            let (a, b, c, d, e, f) = (take(), take(), take(), take(), take(), take());
            let attn = MultiHeadParams { wq: vec![a, d], wk: vec![b, e], wv: vec![c, f], wo: g.input(wo.clone()) };
            let params = BlockParams { attn, ln_gain: g.input(Tensor::vector(&[1.0, 0.5, 2.0, 1.0])), ln_bias: g.input(Tensor::zeros(&[4])) };
            let kvv = g.input(kv.clone());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let out = attention_block(g, qv, kvv, kvv, &mask, &cfg, &params, 0.7, 1e-6, Mode::Eval, &mut r)?;
            let pr = g.input(probe.clone());
            let m = g.mul(out.output, pr)?;
            g.sum(m)
        };
        let report = grad_check(build, &q, 1e-3, 1e-3).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn mismatched_params_are_dimension_errors() {
        let cfg = MultiHeadConfig { heads: 2, d_q_in: 3, d_kv_in: 3, d_head: 2, d_out: 3 };
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = bind_mh(&mut g, &cfg, &mut rng);
        p.wq.pop();
        let x = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(multi_head(&mut g, x, x, x, &[true; 2], &cfg, &p), Err(Error::Dimension(_))));
        let bad = MultiHeadConfig { d_out: 4, ..cfg };
        assert!(bad.validate().is_err());
    }
}
